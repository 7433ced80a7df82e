//! Toy denoising pipeline on a 2D latent canvas.
//!
//! Each step pulls the state toward a blend of one attention layer's output
//! and a fixed target, then re-noises to the next level of a geometric
//! schedule. Runs go coarse (LR grid) then mixed (LR grid with an
//! upsampled HR region) then optionally fine (full HR), and are scored
//! against a run that spends every step at full HR.
//!
//! Noise is keyed by step and physical canvas position, so grids of
//! different resolution draw the same noise where their tokens coincide.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_mixed, attend_reference, phase_consistency_error, AttendOptions, PoolMode, RegionLayout,
    TokenGrid,
};
use crate::boundary::{
    self, BoundaryBand, FixedResizer, LatentGrid, LatentState, Mask, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::kernel::decompose;
use crate::posmap::{Scheme, SchemeParams};
use crate::probe::PairSample;
use crate::rope::{AxisGroup, FrequencySchedule, RopeLayout};
use crate::tensor::Matrix;

/// Allowed gap between requested and realised HR cell fraction.
pub const COVERAGE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    /// Channels per rotary axis; the head dimension is twice this.
    pub dim_per_axis: usize,
    pub base: f64,
    /// Decay control of the pair amplitudes; 0 keeps only the fastest pair.
    pub sharpness: f64,
    /// Logit contributed by each axis at zero offset.
    pub gain: f64,
    /// Scale of the content projections.
    pub content_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            dim_per_axis: 8,
            base: 100.0,
            sharpness: 4.0,
            gain: 12.0,
            content_scale: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub coarse_steps: usize,
    pub mixed_steps: usize,
    pub fine_steps: usize,
    /// Fraction of LR cells upsampled in the mixed stage.
    pub hr_token_ratio: f64,
    /// Explicit noise levels, `total_steps + 1` long.
    pub sigmas: Option<Vec<f64>>,
    /// Ratio of the geometric schedule used when `sigmas` is absent.
    pub sigma_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 30,
            coarse_steps: 10,
            mixed_steps: 20,
            fine_steps: 0,
            hr_token_ratio: 0.3,
            sigmas: None,
            sigma_decay: 0.9,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_steps + self.mixed_steps + self.fine_steps != self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "stage steps {} + {} + {} do not sum to total_steps {}",
                self.coarse_steps, self.mixed_steps, self.fine_steps, self.total_steps
            )));
        }
        if !(self.hr_token_ratio > 0.0 && self.hr_token_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "hr_token_ratio must be in (0, 1], got {}",
                self.hr_token_ratio
            )));
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_decay must be in (0, 1], got {}",
                self.sigma_decay
            )));
        }
        if let Some(s) = &self.sigmas {
            if s.len() != self.total_steps + 1 {
                return Err(Error::InvalidConfig(format!(
                    "sigmas needs {} entries, got {}",
                    self.total_steps + 1,
                    s.len()
                )));
            }
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        match &self.sigmas {
            Some(s) => NoiseSchedule::new(s.clone()),
            None => NoiseSchedule::geometric(self.total_steps, self.sigma_decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// LR grid side length.
    pub lr_size: usize,
    /// HR tokens per LR token along each axis.
    pub upsample: usize,
    pub channels: usize,
    /// Step size of the update.
    pub eta: f64,
    /// Weight of attention against the target pull.
    pub attn_blend: f64,
    pub target_seed: u64,
    pub noise_seed: u64,
    pub boundary_exchange: bool,
    pub n_pad: usize,
    pub pool: PoolMode,
    pub scheme_params: SchemeParams,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Layout JSON replacing the synthetic centre box.
    pub layout: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lr_size: 32,
            upsample: 2,
            channels: 4,
            eta: 0.2,
            attn_blend: 0.8,
            target_seed: 1,
            noise_seed: 7,
            boundary_exchange: false,
            n_pad: boundary::DEFAULT_N_PAD,
            pool: PoolMode::Mean,
            scheme_params: SchemeParams::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            layout: None,
        }
    }
}

impl SimConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: SimConfig =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.lr_size == 0 || self.upsample == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(
                "lr_size, upsample and channels must be positive".into(),
            ));
        }
        if self.model.heads == 0 {
            return Err(Error::InvalidConfig("model needs at least one head".into()));
        }
        if !(0.0..=1.0).contains(&self.attn_blend) || !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidConfig(
                "eta must be in (0, 1] and attn_blend in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One attention head with fixed positional biases and linear content
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHead {
    pub q_bias: Vec<f64>,
    pub k_bias: Vec<f64>,
    /// `channels x dim`.
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl SyntheticHead {
    /// Biases whose per-axis phase kernels have the given amplitudes and
    /// phases: pair `i` gets `q = sqrt(C)(1, 0)`, `k = sqrt(C)(cos phi, sin phi)`.
    pub fn prescribed(
        layout: &RopeLayout,
        amplitudes: &[Vec<f64>],
        phases: &[Vec<f64>],
        w_q: Matrix,
        w_k: Matrix,
    ) -> Result<Self> {
        if amplitudes.len() != layout.num_axes() || phases.len() != layout.num_axes() {
            return Err(Error::LengthMismatch {
                expected: layout.num_axes(),
                actual: amplitudes.len().min(phases.len()),
            });
        }
        let mut q_bias = vec![0.0; layout.dim()];
        let mut k_bias = vec![0.0; layout.dim()];
        for ((g, amp), ph) in layout.groups().iter().zip(amplitudes).zip(phases) {
            let pairs = g.schedule.num_pairs();
            if amp.len() != pairs || ph.len() != pairs {
                return Err(Error::LengthMismatch {
                    expected: pairs,
                    actual: amp.len().min(ph.len()),
                });
            }
            for i in 0..pairs {
                if !(amp[i] >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "negative amplitude {}",
                        amp[i]
                    )));
                }
                let r = amp[i].sqrt();
                let o = g.offset + 2 * i;
                q_bias[o] = r;
                k_bias[o] = r * ph[i].cos();
                k_bias[o + 1] = r * ph[i].sin();
            }
        }
        for w in [&w_q, &w_k] {
            if w.cols() != layout.dim() {
                return Err(Error::LengthMismatch {
                    expected: layout.dim(),
                    actual: w.cols(),
                });
            }
        }
        Ok(Self {
            q_bias,
            k_bias,
            w_q,
            w_k,
        })
    }

    /// `bias + x W` for queries and keys.
    pub fn project(&self, x: &Matrix) -> (Matrix, Matrix) {
        (
            affine(x, &self.w_q, &self.q_bias),
            affine(x, &self.w_k, &self.k_bias),
        )
    }
}

fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        row.copy_from_slice(bias);
        for (c, &xc) in x.row(i).iter().enumerate() {
            row.iter_mut()
                .zip(w.row(c))
                .for_each(|(o, wv)| *o += xc * wv);
        }
    }
    out
}

/// Bank of synthetic heads over two rotary axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub rope: RopeLayout,
    pub heads: Vec<SyntheticHead>,
    /// Normalized pair weights shared by every axis and head.
    pub pair_weights: Vec<f64>,
    pub channels: usize,
}

/// Pair weights `w^i / sum` with `w = sharpness / (1 + sharpness)`.
pub fn pair_weights(pairs: usize, sharpness: f64) -> Result<Vec<f64>> {
    if !(sharpness >= 0.0) || !sharpness.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sharpness must be non-negative, got {sharpness}"
        )));
    }
    let w = sharpness / (1.0 + sharpness);
    let raw: Vec<f64> = (0..pairs).map(|i| w.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|x| x / total).collect())
}

impl SyntheticModel {
    pub fn from_config(cfg: &ModelConfig, channels: usize) -> Result<Self> {
        let rope = RopeLayout::uniform(2, cfg.dim_per_axis, cfg.base)?;
        let dim = rope.dim();
        let weights = pair_weights(cfg.dim_per_axis / 2, cfg.sharpness)?;
        let amp: Vec<f64> = weights
            .iter()
            .map(|c| cfg.gain * (dim as f64).sqrt() * c)
            .collect();
        let zeros = vec![0.0; weights.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = cfg.content_scale / (channels as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| {
            let data = (0..channels * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect();
            Matrix::new(channels, dim, data)
        };
        let heads = (0..cfg.heads)
            .map(|_| {
                let w_q = draw(&mut rng)?;
                let w_k = draw(&mut rng)?;
                SyntheticHead::prescribed(
                    &rope,
                    &[amp.clone(), amp.clone()],
                    &[zeros.clone(), zeros.clone()],
                    w_q,
                    w_k,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rope,
            heads,
            pair_weights: weights,
            channels,
        })
    }

    pub fn dim(&self) -> usize {
        self.rope.dim()
    }

    pub fn axis_group(&self, axis: usize) -> Result<&AxisGroup> {
        self.rope
            .groups()
            .get(axis)
            .ok_or_else(|| Error::InvalidParameter(format!("model has no axis {axis}")))
    }

    pub fn axis_schedule(&self, axis: usize) -> Result<FrequencySchedule> {
        Ok(self.axis_group(axis)?.schedule.clone())
    }

    /// Positional part of random heads on one axis, rotated jointly to a
    /// random absolute position (which leaves the kernel unchanged).
    pub fn probe_samples(&self, axis: usize, n: usize, seed: u64) -> Result<Vec<PairSample>> {
        let g = self.axis_group(axis)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let h = rng.random_range(0..self.heads.len());
                let p: f64 = rng.random_range(-1000.0..1000.0);
                let mut q = self.heads[h].q_bias[g.range()].to_vec();
                let mut k = self.heads[h].k_bias[g.range()].to_vec();
                g.schedule.rotate_slice(&mut q, p);
                g.schedule.rotate_slice(&mut k, p);
                let mut s = PairSample::new(q, k);
                s.head = Some(h);
                s
            })
            .collect())
    }

    /// Largest gap between a head's decomposed bias kernel and its
    /// prescription.
    pub fn prescription_error(&self, gain: f64) -> Result<f64> {
        let dim = self.dim() as f64;
        let mut worst = 0.0f64;
        for head in &self.heads {
            for g in self.rope.groups() {
                let k = decompose(
                    &head.q_bias[g.range()],
                    &head.k_bias[g.range()],
                    &g.schedule,
                )?;
                for (t, c) in k.terms().iter().zip(&self.pair_weights) {
                    worst = worst
                        .max((t.amplitude - gain * dim.sqrt() * c).abs())
                        .max(t.phase.abs());
                }
            }
        }
        Ok(worst)
    }

    fn mean_over_heads(
        &self,
        x: &Matrix,
        mut f: impl FnMut(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Matrix> {
        let mut acc = Matrix::zeros(x.rows(), x.cols());
        for head in &self.heads {
            let (q, k) = head.project(x);
            let out = f(&q, &k)?;
            acc.data_mut()
                .iter_mut()
                .zip(out.data())
                .for_each(|(a, o)| *a += o);
        }
        let n = self.heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Head-averaged attention on a uniform grid, values = `x`.
    pub fn attend_grid(&self, grid: &TokenGrid, x: &Matrix) -> Result<Matrix> {
        self.mean_over_heads(x, |q, k| {
            Ok(attend_reference(grid, q, k, x, &self.rope)?.values)
        })
    }

    /// Head-averaged attention on a mixed layout.
    pub fn attend_layout(
        &self,
        layout: &RegionLayout,
        x: &Matrix,
        scheme: Scheme,
        opts: &AttendOptions,
    ) -> Result<Matrix> {
        self.mean_over_heads(x, |q, k| {
            Ok(attend_mixed(layout, q, k, x, scheme, &self.rope, opts)?.values)
        })
    }
}

/// Bank with default gain and content scale.
pub fn build_synthetic_model(
    num_heads: usize,
    dim: usize,
    sharpness: f64,
    seed: u64,
) -> Result<SyntheticModel> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::InvalidParameter(format!(
            "two rotary axes need a head dimension divisible by 4, got {dim}"
        )));
    }
    let cfg = ModelConfig {
        heads: num_heads,
        dim_per_axis: dim / 2,
        sharpness,
        seed,
        ..ModelConfig::default()
    };
    SyntheticModel::from_config(&cfg, SimConfig::default().channels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    k: [f64; 2],
    phase: f64,
    amplitude: f64,
}

/// Band-limited cosines plus a sharp-edged box, sampled at physical
/// canvas coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    waves: Vec<Vec<Wave>>,
    box_lo: [f64; 2],
    box_hi: [f64; 2],
    offsets: Vec<f64>,
}

const BOX_OFFSETS: [f64; 4] = [1.0, -1.0, 0.5, 0.8];
const WAVES_PER_CHANNEL: usize = 6;

impl Target {
    pub fn new(seed: u64, channels: usize, canvas: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..channels)
            .map(|_| {
                (0..WAVES_PER_CHANNEL)
                    .map(|_| {
                        let k0: f64 = StandardNormal.sample(&mut rng);
                        let k1: f64 = StandardNormal.sample(&mut rng);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        let a: f64 = StandardNormal.sample(&mut rng);
                        Wave {
                            k: [0.25 * k0, 0.25 * k1],
                            phase,
                            amplitude: 0.5 * a,
                        }
                    })
                    .collect()
            })
            .collect();
        let c = canvas as f64;
        Self {
            waves,
            box_lo: [0.3125 * c, 0.25 * c],
            box_hi: [0.6875 * c, 0.625 * c],
            offsets: (0..channels)
                .map(|i| BOX_OFFSETS[i % BOX_OFFSETS.len()])
                .collect(),
        }
    }

    pub fn sample(&self, p: [f64; 2], out: &mut [f64]) {
        let inside = (0..2).all(|a| p[a] >= self.box_lo[a] && p[a] < self.box_hi[a]);
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.waves[c]
                .iter()
                .map(|w| w.amplitude * (w.k[0] * p[0] + w.k[1] * p[1] + w.phase).cos())
                .sum();
            if inside {
                *o += self.offsets[c];
            }
        }
    }
}

/// Where the mixed-stage HR region comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum LayoutSource {
    /// Centred box sized to the configured ratio.
    Synthetic,
    /// Row-major flags over LR cells.
    Mask(Vec<bool>),
    File(PathBuf),
}

/// Centred box covering about `ratio` of an `n x n` grid.
pub fn centered_box_mask(n: usize, ratio: f64) -> Vec<bool> {
    let cells = ratio * (n * n) as f64;
    let side = (cells.sqrt().round() as usize).min(n);
    let other = if side == 0 {
        0
    } else {
        ((cells / side as f64).round() as usize).min(n)
    };
    let (r0, c0) = ((n - side) / 2, (n - other) / 2);
    (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            r >= r0 && r < r0 + side && c >= c0 && c < c0 + other
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub hr_token_ratio: f64,
    pub rms_global: f64,
    pub rms_hr: f64,
    pub phase_err: f64,
    pub coarse_steps: usize,
    pub mixed_steps: usize,
    pub fine_steps: usize,
    /// Wall-clock seconds of the coarse, mixed and fine stages.
    pub stage_seconds: [f64; 3],
}

impl RunReport {
    pub fn seconds(&self) -> f64 {
        self.stage_seconds.iter().sum()
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["scheme", "rms_global", "rms_hr", "phase_err", "seconds"];

/// CSV report; timings are left blank unless requested so that repeated
/// runs produce identical bytes.
pub fn write_reports<W: std::io::Write>(
    reports: &[RunReport],
    comment: Option<&str>,
    timings: bool,
    mut out: W,
) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<report>", e))?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.scheme.to_string(),
            r.rms_global.to_string(),
            r.rms_hr.to_string(),
            r.phase_err.to_string(),
            if timings {
                format!("{:.3}", r.seconds())
            } else {
                String::new()
            },
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

/// Token set of one stage: values plus integer physical coordinates.
struct Tokens {
    x: Matrix,
    phys: Vec<[usize; 2]>,
}

/// Final tokens as scored against the reference.
struct Outcome {
    tokens: Tokens,
    weight: Vec<f64>,
    in_region: Vec<bool>,
    phase_err: f64,
    stage_seconds: [f64; 3],
}

pub struct Simulator {
    cfg: SimConfig,
    model: SyntheticModel,
    target: Target,
    schedule: NoiseSchedule,
    reference: OnceLock<Matrix>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SyntheticModel::from_config(&cfg.model, cfg.channels)?;
        let target = Target::new(cfg.target_seed, cfg.channels, cfg.lr_size * cfg.upsample);
        let schedule = cfg.schedule.noise_schedule()?;
        Ok(Self {
            cfg,
            model,
            target,
            schedule,
            reference: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn canvas(&self) -> usize {
        self.cfg.lr_size * self.cfg.upsample
    }

    fn key(&self, p: [usize; 2]) -> u64 {
        (p[0] * self.canvas() + p[1]) as u64
    }

    fn noise(&self, step: usize, p: [usize; 2]) -> Vec<f64> {
        boundary::noise_vector(self.cfg.noise_seed, step, self.key(p), self.cfg.channels)
    }

    fn targets(&self, phys: &[[usize; 2]]) -> Matrix {
        let c = self.cfg.channels;
        let mut out = Matrix::zeros(phys.len(), c);
        for (i, p) in phys.iter().enumerate() {
            self.target
                .sample([p[0] as f64, p[1] as f64], out.row_mut(i));
        }
        out
    }

    /// `(1 - sigma_step) x + sigma_step eps(step, position)` per row.
    fn renoise_rows(&self, x: &Matrix, phys: &[[usize; 2]], step: usize) -> Result<Matrix> {
        let sigma = self.schedule.sigma(step)?;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        out.data_mut()
            .par_chunks_mut(x.cols())
            .enumerate()
            .for_each(|(i, row)| {
                let eps = self.noise(step, phys[i]);
                for ((o, v), e) in row.iter_mut().zip(x.row(i)).zip(eps) {
                    *o = (1.0 - sigma) * v + sigma * e;
                }
            });
        Ok(out)
    }

    /// Clean estimate after one update.
    fn update(&self, x: &Matrix, attn: &Matrix, target: &Matrix) -> Matrix {
        let (eta, beta) = (self.cfg.eta, self.cfg.attn_blend);
        let mut out = x.clone();
        for ((o, a), t) in out
            .data_mut()
            .iter_mut()
            .zip(attn.data())
            .zip(target.data())
        {
            let v = *o;
            *o = v + eta * (beta * (a - v) + (1.0 - beta) * (t - v));
        }
        out
    }

    fn lr_grid(&self) -> Result<TokenGrid> {
        let r = self.cfg.upsample as f64;
        TokenGrid::new(vec![(self.cfg.lr_size, r), (self.cfg.lr_size, r)])
    }

    fn hr_grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(vec![(self.canvas(), 1.0), (self.canvas(), 1.0)])
    }

    /// HR cell flags for a layout source, checked against the configured
    /// ratio.
    pub fn resolve_mask(&self, source: &LayoutSource, ratio: f64) -> Result<Vec<bool>> {
        let n = self.cfg.lr_size;
        let mask = match source {
            LayoutSource::Synthetic => centered_box_mask(n, ratio),
            LayoutSource::Mask(m) => m.clone(),
            LayoutSource::File(path) => {
                let layout = RegionLayout::from_json_file(path)?;
                if layout.lr_shape() != [n, n]
                    || layout.ratio() != [self.cfg.upsample, self.cfg.upsample]
                {
                    return Err(Error::InvalidConfig(format!(
                        "layout {} does not match a {n}x{n} grid with ratio {}",
                        path.display(),
                        self.cfg.upsample
                    )));
                }
                layout.hr_cells().to_vec()
            }
        };
        if mask.len() != n * n {
            return Err(Error::LengthMismatch {
                expected: n * n,
                actual: mask.len(),
            });
        }
        let actual = mask.iter().filter(|&&h| h).count() as f64 / (n * n) as f64;
        if (actual - ratio).abs() > COVERAGE_TOLERANCE {
            return Err(Error::MaskCoverage {
                requested: ratio,
                actual,
            });
        }
        Ok(mask)
    }

    /// Final canvas of the all-HR run, row-major `canvas^2 x channels`.
    pub fn reference(&self) -> Result<&Matrix> {
        if let Some(r) = self.reference.get() {
            return Ok(r);
        }
        let total = self.cfg.schedule.total_steps;
        let out = self.execute(Scheme::PiHr, &[], (0, 0, total))?;
        let mut canvas = Matrix::zeros(self.canvas() * self.canvas(), self.cfg.channels);
        for (i, p) in out.tokens.phys.iter().enumerate() {
            canvas
                .row_mut(p[0] * self.canvas() + p[1])
                .copy_from_slice(out.tokens.x.row(i));
        }
        Ok(self.reference.get_or_init(|| canvas))
    }

    /// Runs the configured schedule under `scheme`.
    pub fn run_schedule(&self, scheme: Scheme, source: &LayoutSource) -> Result<RunReport> {
        let s = &self.cfg.schedule;
        self.run_with(
            scheme,
            source,
            s.hr_token_ratio,
            (s.coarse_steps, s.mixed_steps, s.fine_steps),
        )
    }

    /// Runs with an explicit ratio and stage split.
    pub fn run_with(
        &self,
        scheme: Scheme,
        source: &LayoutSource,
        ratio: f64,
        steps: (usize, usize, usize),
    ) -> Result<RunReport> {
        if steps.0 + steps.1 + steps.2 != self.cfg.schedule.total_steps {
            return Err(Error::InvalidConfig(
                "stage steps do not sum to total_steps".into(),
            ));
        }
        let mask = self.resolve_mask(source, ratio)?;
        let reference = self.reference()?;
        let out = self.execute(scheme, &mask, steps)?;

        let c = self.cfg.channels as f64;
        let (mut num, mut den, mut hr_num, mut hr_n) = (0.0, 0.0, 0.0, 0usize);
        for (i, p) in out.tokens.phys.iter().enumerate() {
            let r = reference.row(p[0] * self.canvas() + p[1]);
            let err: f64 = out
                .tokens
                .x
                .row(i)
                .iter()
                .zip(r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / c;
            num += out.weight[i] * err;
            den += out.weight[i];
            if out.in_region[i] {
                hr_num += err;
                hr_n += 1;
            }
        }
        Ok(RunReport {
            scheme,
            hr_token_ratio: ratio,
            rms_global: (num / den).sqrt(),
            rms_hr: if hr_n == 0 {
                0.0
            } else {
                (hr_num / hr_n as f64).sqrt()
            },
            phase_err: out.phase_err,
            coarse_steps: steps.0,
            mixed_steps: steps.1,
            fine_steps: steps.2,
            stage_seconds: out.stage_seconds,
        })
    }

    /// One run per scheme on identical seeds.
    pub fn compare_schemes(
        &self,
        schemes: &[Scheme],
        source: &LayoutSource,
    ) -> Result<Vec<RunReport>> {
        self.reference()?;
        schemes
            .par_iter()
            .map(|&s| self.run_schedule(s, source))
            .collect()
    }

    fn execute(
        &self,
        scheme: Scheme,
        hr_mask: &[bool],
        (coarse, mixed, fine): (usize, usize, usize),
    ) -> Result<Outcome> {
        let n = self.cfg.lr_size;
        let r = self.cfg.upsample;
        let mut seconds = [0.0; 3];
        let mut step = 0;

        // coarse
        let clock = Instant::now();
        let lr_phys: Vec<[usize; 2]> = (0..n * n).map(|i| [(i / n) * r, (i % n) * r]).collect();
        let zero = Matrix::zeros(n * n, self.cfg.channels);
        let mut x_lr = self.renoise_rows(&zero, &lr_phys, 0)?;
        if coarse > 0 {
            let grid = self.lr_grid()?;
            let target = self.targets(&lr_phys);
            for _ in 0..coarse {
                let attn = self.model.attend_grid(&grid, &x_lr)?;
                let x0 = self.update(&x_lr, &attn, &target);
                step += 1;
                x_lr = self.renoise_rows(&x0, &lr_phys, step)?;
            }
        }
        seconds[0] = clock.elapsed().as_secs_f64();

        // mixed
        let clock = Instant::now();
        let mut mixed_state: Option<(RegionLayout, Tokens)> = None;
        let mut phase_err = 0.0;
        if mixed > 0 {
            let hr = Mask::new(vec![n, n], hr_mask.to_vec())?;
            let pad = if self.cfg.boundary_exchange {
                self.cfg.n_pad
            } else {
                0
            };
            let lr_cells = boundary::dilate_mask(&hr.not(), pad);
            let hr_cells = boundary::dilate_mask(&hr, pad);
            let layout = RegionLayout::new(
                vec![n, n],
                vec![r, r],
                lr_cells.data().to_vec(),
                hr_cells.data().to_vec(),
            )?;
            let band = BoundaryBand::new(&hr, &[r, r], pad)?;
            phase_err =
                phase_consistency_error(&layout, scheme, &self.cfg.scheme_params, self.cfg.pool);

            let phys: Vec<[usize; 2]> = layout
                .tokens()
                .iter()
                .map(|t| [t.physical[0] as usize, t.physical[1] as usize])
                .collect();
            let mut x = Matrix::zeros(layout.num_tokens(), self.cfg.channels);
            for (i, t) in layout.tokens().iter().enumerate() {
                x.row_mut(i).copy_from_slice(x_lr.row(t.cell));
            }
            let nl = layout.num_lr_tokens();
            let hr_part = Matrix::new(
                layout.num_tokens() - nl,
                self.cfg.channels,
                x.data()[nl * self.cfg.channels..].to_vec(),
            )?;
            let hr_noised = self.renoise_rows(&hr_part, &phys[nl..], step)?;
            x.data_mut()[nl * self.cfg.channels..].copy_from_slice(hr_noised.data());

            let target = self.targets(&phys);
            let opts = AttendOptions {
                pool: self.cfg.pool,
                params: self.cfg.scheme_params,
                keep_scores: false,
            };
            for _ in 0..mixed {
                let attn = self.model.attend_layout(&layout, &x, scheme, &opts)?;
                let x0 = self.update(&x, &attn, &target);
                let mut next = self.renoise_rows(&x0, &phys, step + 1)?;
                if pad > 0 {
                    self.exchange(&layout, &band, &x, &x0, step, &mut next)?;
                }
                step += 1;
                x = next;
            }
            mixed_state = Some((layout, Tokens { x, phys }));
        }
        seconds[1] = clock.elapsed().as_secs_f64();

        // fine
        let clock = Instant::now();
        let in_mask = |p: [usize; 2]| !hr_mask.is_empty() && hr_mask[(p[0] / r) * n + p[1] / r];
        let outcome = if fine > 0 {
            let side = self.canvas();
            let phys: Vec<[usize; 2]> = (0..side * side).map(|i| [i / side, i % side]).collect();
            let mut x = Matrix::zeros(side * side, self.cfg.channels);
            let mut fresh = vec![true; side * side];
            match &mixed_state {
                Some((layout, tokens)) => {
                    let mut lr_of_cell = vec![usize::MAX; n * n];
                    for (i, t) in layout.tokens()[..layout.num_lr_tokens()].iter().enumerate() {
                        lr_of_cell[t.cell] = i;
                    }
                    for (i, p) in phys.iter().enumerate() {
                        let cell = (p[0] / r) * n + p[1] / r;
                        if !layout.lr_cells()[cell] || hr_mask[cell] {
                            continue;
                        }
                        x.row_mut(i).copy_from_slice(tokens.x.row(lr_of_cell[cell]));
                    }
                    for (j, t) in layout
                        .tokens()
                        .iter()
                        .enumerate()
                        .skip(layout.num_lr_tokens())
                    {
                        if hr_mask[t.cell] {
                            let p = tokens.phys[j];
                            x.row_mut(p[0] * side + p[1])
                                .copy_from_slice(tokens.x.row(j));
                            fresh[p[0] * side + p[1]] = false;
                        }
                    }
                }
                None => {
                    for (i, p) in phys.iter().enumerate() {
                        x.row_mut(i)
                            .copy_from_slice(x_lr.row((p[0] / r) * n + p[1] / r));
                    }
                }
            }
            let noised = self.renoise_rows(&x, &phys, step)?;
            for (i, f) in fresh.iter().enumerate() {
                if *f {
                    x.row_mut(i).copy_from_slice(noised.row(i));
                }
            }

            let grid = self.hr_grid()?;
            let target = self.targets(&phys);
            for _ in 0..fine {
                let attn = self.model.attend_grid(&grid, &x)?;
                let x0 = self.update(&x, &attn, &target);
                step += 1;
                x = self.renoise_rows(&x0, &phys, step)?;
            }
            let in_region = phys.iter().map(|&p| in_mask(p)).collect();
            Outcome {
                weight: vec![1.0; phys.len()],
                in_region,
                tokens: Tokens { x, phys },
                phase_err,
                stage_seconds: seconds,
            }
        } else if let Some((layout, tokens)) = mixed_state {
            // each cell is scored once, by the resolution that owns it
            let area = (r * r) as f64;
            let keep: Vec<usize> = layout
                .tokens()
                .iter()
                .enumerate()
                .filter(|(_, t)| match t.resolution {
                    crate::posmap::Resolution::Low => !hr_mask[t.cell],
                    crate::posmap::Resolution::High => hr_mask[t.cell],
                })
                .map(|(i, _)| i)
                .collect();
            let mut x = Matrix::zeros(keep.len(), self.cfg.channels);
            for (o, &i) in keep.iter().enumerate() {
                x.row_mut(o).copy_from_slice(tokens.x.row(i));
            }
            Outcome {
                weight: keep
                    .iter()
                    .map(|&i| match layout.tokens()[i].resolution {
                        crate::posmap::Resolution::Low => area,
                        crate::posmap::Resolution::High => 1.0,
                    })
                    .collect(),
                in_region: keep
                    .iter()
                    .map(|&i| hr_mask[layout.tokens()[i].cell])
                    .collect(),
                tokens: Tokens {
                    x,
                    phys: keep.iter().map(|&i| tokens.phys[i]).collect(),
                },
                phase_err,
                stage_seconds: seconds,
            }
        } else {
            Outcome {
                weight: vec![(r * r) as f64; n * n],
                in_region: lr_phys.iter().map(|&p| in_mask(p)).collect(),
                tokens: Tokens {
                    x: x_lr,
                    phys: lr_phys,
                },
                phase_err,
                stage_seconds: seconds,
            }
        };
        let mut outcome = outcome;
        outcome.stage_seconds[2] = clock.elapsed().as_secs_f64();
        Ok(outcome)
    }

    /// Overwrites band tokens of `next` through the boundary module.
    fn exchange(
        &self,
        layout: &RegionLayout,
        band: &BoundaryBand,
        x: &Matrix,
        x0: &Matrix,
        step: usize,
        next: &mut Matrix,
    ) -> Result<()> {
        let n = self.cfg.lr_size;
        let r = self.cfg.upsample;
        let side = self.canvas();
        let c = self.cfg.channels;
        let lr_grid = |m: &Matrix| -> Result<LatentGrid> {
            let mut g = LatentGrid::zeros(vec![n, n], c).with_stride(vec![r, r])?;
            for (i, t) in layout.tokens()[..layout.num_lr_tokens()].iter().enumerate() {
                g.token_mut(t.cell).copy_from_slice(m.row(i));
            }
            Ok(g)
        };
        let hr_grid = |m: &Matrix| -> LatentGrid {
            let mut g = LatentGrid::zeros(vec![side, side], c);
            for (i, t) in layout
                .tokens()
                .iter()
                .enumerate()
                .skip(layout.num_lr_tokens())
            {
                let (a, b) = (t.physical[0] as usize, t.physical[1] as usize);
                g.token_mut(a * side + b).copy_from_slice(m.row(i));
            }
            g
        };
        let sigma = self.schedule.sigma(step)?;
        let lr = LatentState {
            x_t: lr_grid(x)?,
            x0_hat: lr_grid(x0)?,
            t: step,
            sigma,
        };
        let hr = LatentState {
            x_t: hr_grid(x),
            x0_hat: hr_grid(x0),
            t: step,
            sigma,
        };
        let (lr2, hr2) = boundary::expand_and_replace(
            &lr,
            &hr,
            band,
            &self.schedule,
            &FixedResizer,
            self.cfg.noise_seed,
        )?;
        for (i, t) in layout.tokens().iter().enumerate() {
            match t.resolution {
                crate::posmap::Resolution::Low if band.lr_band.get(t.cell) => {
                    next.row_mut(i).copy_from_slice(lr2.x_t.token(t.cell));
                }
                crate::posmap::Resolution::High => {
                    let k = t.physical[0] as usize * side + t.physical[1] as usize;
                    if band.hr_band.get(k) {
                        next.row_mut(i).copy_from_slice(hr2.x_t.token(k));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: one run on a fresh simulator.
pub fn run_schedule(cfg: &SimConfig, scheme: Scheme, source: &LayoutSource) -> Result<RunReport> {
    Simulator::new(cfg.clone())?.run_schedule(scheme, source)
}

pub fn compare_schemes(
    cfg: &SimConfig,
    schemes: &[Scheme],
    source: &LayoutSource,
) -> Result<Vec<RunReport>> {
    Simulator::new(cfg.clone())?.compare_schemes(schemes, source)
}
