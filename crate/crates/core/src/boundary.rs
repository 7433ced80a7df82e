//! Latent exchange across LR/HR seams.
//!
//! Both masks are dilated by `n_pad` tokens. Inside the overlap, HR tokens
//! are overwritten by the upsampled LR estimate and LR tokens by the
//! downsampled HR estimate, each re-noised to the next noise level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{row_major_strides, unravel};
use crate::error::{Error, Result};

pub const DEFAULT_N_PAD: usize = 2;

/// Boolean grid over tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: bool) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            shape: self.shape.clone(),
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        Ok(Mask {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    /// Each cell becomes a block of `factors` cells.
    pub fn upsample(&self, factors: &[usize]) -> Result<Mask> {
        check_factors(&self.shape, factors)?;
        let shape: Vec<usize> = self.shape.iter().zip(factors).map(|(n, f)| n * f).collect();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let idx = unravel(i, &shape);
                let src: Vec<usize> = idx.iter().zip(factors).map(|(i, f)| i / f).collect();
                self.data[flat(&src, &self.shape)]
            })
            .collect();
        Ok(Mask { shape, data })
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidParameter(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn flat(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter()
        .zip(row_major_strides(shape))
        .map(|(i, s)| i * s)
        .sum()
}

fn check_factors(shape: &[usize], factors: &[usize]) -> Result<()> {
    if factors.len() != shape.len() {
        return Err(Error::LengthMismatch {
            expected: shape.len(),
            actual: factors.len(),
        });
    }
    if factors.contains(&0) {
        return Err(Error::InvalidParameter(
            "resize factor must be positive".into(),
        ));
    }
    Ok(())
}

/// Chebyshev dilation: a cell is set if any set cell lies within `n_pad`
/// along every axis. Applied as one running max per axis.
pub fn dilate_mask(mask: &Mask, n_pad: usize) -> Mask {
    let mut data = mask.data.clone();
    if n_pad == 0 {
        return mask.clone();
    }
    let strides = row_major_strides(&mask.shape);
    for (a, &len) in mask.shape.iter().enumerate() {
        let src = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = (i / strides[a]) % len;
            let lo = pos.saturating_sub(n_pad);
            let hi = (pos + n_pad).min(len - 1);
            let base = i - pos * strides[a];
            *out = (lo..=hi).any(|p| src[base + p * strides[a]]);
        }
    }
    Mask {
        shape: mask.shape.clone(),
        data,
    }
}

/// Spatial grid of latent vectors with `channels` values per token.
/// `stride` is the physical spacing per axis and only affects noise keys.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Vec<usize>,
    channels: usize,
    stride: Vec<usize>,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(shape: Vec<usize>, channels: usize, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product::<usize>() * channels;
        if data.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        let stride = vec![1; shape.len()];
        Ok(Self {
            shape,
            channels,
            stride,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>, channels: usize) -> Self {
        let n = shape.iter().product::<usize>() * channels;
        let stride = vec![1; shape.len()];
        Self {
            shape,
            channels,
            stride,
            data: vec![0.0; n],
        }
    }

    pub fn with_stride(mut self, stride: Vec<usize>) -> Result<Self> {
        check_factors(&self.shape, &stride)?;
        self.stride = stride;
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> &[usize] {
        &self.stride
    }

    pub fn num_tokens(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Row-major index of the token's physical position on the finest
    /// canvas, so coinciding positions on different grids share noise.
    pub fn noise_key(&self, i: usize) -> u64 {
        let idx = unravel(i, &self.shape);
        let canvas: Vec<usize> = self
            .shape
            .iter()
            .zip(&self.stride)
            .map(|(n, s)| n * s)
            .collect();
        let phys: Vec<usize> = idx.iter().zip(&self.stride).map(|(i, s)| i * s).collect();
        flat(&phys, &canvas) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeDirection {
    Up,
    Down,
}

/// Swappable latent resampler.
pub trait Resizer {
    fn resize(
        &self,
        x: &LatentGrid,
        factors: &[usize],
        direction: ResizeDirection,
    ) -> Result<LatentGrid>;
}

/// Nearest-neighbour replication up, block mean down.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedResizer;

impl Resizer for FixedResizer {
    fn resize(
        &self,
        x: &LatentGrid,
        factors: &[usize],
        direction: ResizeDirection,
    ) -> Result<LatentGrid> {
        check_factors(&x.shape, factors)?;
        let c = x.channels;
        match direction {
            ResizeDirection::Up => {
                let shape: Vec<usize> = x.shape.iter().zip(factors).map(|(n, f)| n * f).collect();
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n * c);
                for i in 0..n {
                    let idx = unravel(i, &shape);
                    let src: Vec<usize> = idx.iter().zip(factors).map(|(i, f)| i / f).collect();
                    data.extend_from_slice(x.token(flat(&src, &x.shape)));
                }
                let stride = x
                    .stride
                    .iter()
                    .zip(factors)
                    .map(|(s, f)| (s / f).max(1))
                    .collect();
                Ok(LatentGrid {
                    shape,
                    channels: c,
                    stride,
                    data,
                })
            }
            ResizeDirection::Down => {
                for (axis, (&extent, &factor)) in x.shape.iter().zip(factors).enumerate() {
                    if extent % factor != 0 {
                        return Err(Error::NotDivisible {
                            axis,
                            extent,
                            factor,
                        });
                    }
                }
                let shape: Vec<usize> = x.shape.iter().zip(factors).map(|(n, f)| n / f).collect();
                let block: usize = factors.iter().product();
                let mut data = vec![0.0; shape.iter().product::<usize>() * c];
                for i in 0..x.num_tokens() {
                    let idx = unravel(i, &x.shape);
                    let dst: Vec<usize> = idx.iter().zip(factors).map(|(i, f)| i / f).collect();
                    let o = flat(&dst, &shape) * c;
                    for (d, v) in data[o..o + c].iter_mut().zip(x.token(i)) {
                        *d += v;
                    }
                }
                data.iter_mut().for_each(|d| *d /= block as f64);
                let stride = x.stride.iter().zip(factors).map(|(s, f)| s * f).collect();
                Ok(LatentGrid {
                    shape,
                    channels: c,
                    stride,
                    data,
                })
            }
        }
    }
}

/// Resizes every spatial axis by the same integer factor.
pub fn resize_latent(
    x: &LatentGrid,
    factor: usize,
    direction: ResizeDirection,
) -> Result<LatentGrid> {
    FixedResizer.resize(x, &vec![factor; x.shape.len()], direction)
}

/// Noise levels indexed by step; `sigmas[0]` is the noisiest.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidSchedule("empty schedule".into()));
        }
        if let Some(s) = sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidSchedule(format!("sigma {s} outside [0, 1]")));
        }
        if sigmas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidSchedule(
                "sigmas must be non-increasing".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    /// `decay^t` for `t < steps`, then a final 0.
    pub fn geometric(steps: usize, decay: f64) -> Result<Self> {
        let mut sigmas: Vec<f64> = (0..steps).map(|t| decay.powi(t as i32)).collect();
        sigmas.push(0.0);
        Self::new(sigmas)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.sigmas
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                len: self.sigmas.len(),
            })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draws determined by `(seed, t, key)` alone.
pub fn noise_vector(seed: u64, t: usize, key: u64, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(t as u64)));
    rng.set_stream(key);
    (0..channels)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// `(1 - sigma) x0 + sigma eps` for one token.
pub fn renoise_token(x0: &[f64], sigma: f64, seed: u64, t: usize, key: u64, out: &mut [f64]) {
    let eps = noise_vector(seed, t, key, x0.len());
    for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
        *o = (1.0 - sigma) * x + sigma * e;
    }
}

pub fn renoise(
    x0: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentGrid> {
    let sigma = schedule.sigma(t)?;
    let mut out = x0.clone();
    for i in 0..x0.num_tokens() {
        renoise_token(
            x0.token(i),
            sigma,
            seed,
            t,
            x0.noise_key(i),
            out.token_mut(i),
        );
    }
    Ok(out)
}

/// Exchange bands for one LR/HR split.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryBand {
    pub n_pad: usize,
    pub ratio: Vec<usize>,
    /// LR-grid tokens inside the HR region near the seam.
    pub lr_band: Mask,
    /// HR-grid tokens inside the LR region near the seam.
    pub hr_band: Mask,
}

impl BoundaryBand {
    /// `hr_cells` flags upsampled cells on the LR grid.
    pub fn new(hr_cells: &Mask, ratio: &[usize], n_pad: usize) -> Result<Self> {
        let lr_cells = hr_cells.not();
        let lr_band = dilate_mask(&lr_cells, n_pad).and(hr_cells)?;
        let hr_band = dilate_mask(hr_cells, n_pad)
            .and(&lr_cells)?
            .upsample(ratio)?;
        Ok(Self {
            n_pad,
            ratio: ratio.to_vec(),
            lr_band,
            hr_band,
        })
    }

    /// HR-region cells extended by the band, on the LR grid.
    pub fn hr_extent(hr_cells: &Mask, n_pad: usize) -> Mask {
        dilate_mask(hr_cells, n_pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x_t: LatentGrid,
    pub x0_hat: LatentGrid,
    pub t: usize,
    pub sigma: f64,
}

/// Replaces band tokens of both states with the other side's resized
/// estimate, re-noised to level `t + 1`. Everything else is copied as is.
pub fn expand_and_replace(
    lr: &LatentState,
    hr: &LatentState,
    band: &BoundaryBand,
    schedule: &NoiseSchedule,
    resizer: &dyn Resizer,
    seed: u64,
) -> Result<(LatentState, LatentState)> {
    if lr.t != hr.t {
        return Err(Error::TimestepMismatch { lr: lr.t, hr: hr.t });
    }
    let next = lr.t + 1;
    let sigma = schedule.sigma(next)?;
    if band.lr_band.shape() != lr.x_t.shape() || band.hr_band.shape() != hr.x_t.shape() {
        return Err(Error::InvalidParameter(
            "band masks do not match the state grids".into(),
        ));
    }
    let mut lr_out = lr.clone();
    let mut hr_out = hr.clone();

    if band.hr_band.count() > 0 {
        let up = resizer.resize(&lr.x0_hat, &band.ratio, ResizeDirection::Up)?;
        for i in (0..hr.x_t.num_tokens()).filter(|&i| band.hr_band.get(i)) {
            let key = hr.x_t.noise_key(i);
            renoise_token(up.token(i), sigma, seed, next, key, hr_out.x_t.token_mut(i));
            hr_out.x0_hat.token_mut(i).copy_from_slice(up.token(i));
        }
    }
    if band.lr_band.count() > 0 {
        let down = resizer.resize(&hr.x0_hat, &band.ratio, ResizeDirection::Down)?;
        for i in (0..lr.x_t.num_tokens()).filter(|&i| band.lr_band.get(i)) {
            let key = lr.x_t.noise_key(i);
            renoise_token(
                down.token(i),
                sigma,
                seed,
                next,
                key,
                lr_out.x_t.token_mut(i),
            );
            lr_out.x0_hat.token_mut(i).copy_from_slice(down.token(i));
        }
    }
    Ok((lr_out, hr_out))
}
