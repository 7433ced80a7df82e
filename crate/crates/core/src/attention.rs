//! Dense RoPE attention over grids that mix LR and HR tokens.
//!
//! A [`RegionLayout`] starts from an LR cell grid. Cells flagged HR are
//! replaced by `prod(ratio)` HR tokens; cells flagged LR keep one token.
//! A cell may carry both (the overlap band used by boundary exchange).
//! Physical coordinates are in HR strides and corner aligned: the LR token
//! of cell `m` sits at `m * ratio`, HR token `s` of that cell at
//! `m * ratio + s`.
//!
//! Tokens are ordered LR first (cells row-major), then HR grouped by cell
//! (cells row-major, sub-positions row-major inside each cell).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posmap::{
    ntk_rescale, yarn_rescale, NtkParams, Resolution, Scheme, SchemeParams, YarnParams,
};
use crate::rope::{dot, RopeLayout};
use crate::tensor::Matrix;

/// Row-major strides of `shape`.
pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

pub(crate) fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenInfo {
    pub resolution: Resolution,
    /// Flat row-major LR cell index.
    pub cell: usize,
    /// Per-axis coordinate in HR strides.
    pub physical: Vec<f64>,
}

/// Half-open box of LR cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellBox {
    pub start: Vec<usize>,
    pub end: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionLayout {
    lr_shape: Vec<usize>,
    ratio: Vec<usize>,
    lr_cells: Vec<bool>,
    hr_cells: Vec<bool>,
    tokens: Vec<TokenInfo>,
    num_lr: usize,
}

impl RegionLayout {
    pub fn new(
        lr_shape: Vec<usize>,
        ratio: Vec<usize>,
        lr_cells: Vec<bool>,
        hr_cells: Vec<bool>,
    ) -> Result<Self> {
        if lr_shape.is_empty() || lr_shape.contains(&0) {
            return Err(Error::InvalidLayout(format!("bad LR shape {lr_shape:?}")));
        }
        if ratio.len() != lr_shape.len() {
            return Err(Error::InvalidLayout(format!(
                "{} ratios for {} axes",
                ratio.len(),
                lr_shape.len()
            )));
        }
        if ratio.contains(&0) {
            return Err(Error::InvalidLayout(
                "ratio must be a positive integer".into(),
            ));
        }
        let n_cells: usize = lr_shape.iter().product();
        if lr_cells.len() != n_cells || hr_cells.len() != n_cells {
            return Err(Error::InvalidLayout(format!(
                "masks must cover {n_cells} cells, got {} and {}",
                lr_cells.len(),
                hr_cells.len()
            )));
        }
        if let Some(c) = (0..n_cells).find(|&c| !lr_cells[c] && !hr_cells[c]) {
            return Err(Error::InvalidLayout(format!("cell {c} has no tokens")));
        }

        let group: usize = ratio.iter().product();
        let sub_shape = ratio.clone();
        let mut tokens = Vec::new();
        for c in (0..n_cells).filter(|&c| lr_cells[c]) {
            let m = unravel(c, &lr_shape);
            tokens.push(TokenInfo {
                resolution: Resolution::Low,
                cell: c,
                physical: m
                    .iter()
                    .zip(&ratio)
                    .map(|(&m, &r)| (m * r) as f64)
                    .collect(),
            });
        }
        let num_lr = tokens.len();
        for c in (0..n_cells).filter(|&c| hr_cells[c]) {
            let m = unravel(c, &lr_shape);
            for s in 0..group {
                let sub = unravel(s, &sub_shape);
                tokens.push(TokenInfo {
                    resolution: Resolution::High,
                    cell: c,
                    physical: (0..m.len())
                        .map(|a| (m[a] * ratio[a] + sub[a]) as f64)
                        .collect(),
                });
            }
        }
        Ok(Self {
            lr_shape,
            ratio,
            lr_cells,
            hr_cells,
            tokens,
            num_lr,
        })
    }

    /// Every cell is either LR or HR according to `hr_mask`.
    pub fn from_hr_mask(
        lr_shape: Vec<usize>,
        ratio: Vec<usize>,
        hr_mask: Vec<bool>,
    ) -> Result<Self> {
        let lr = hr_mask.iter().map(|h| !h).collect();
        Self::new(lr_shape, ratio, lr, hr_mask)
    }

    /// HR where any box covers the cell; boxes are in LR cell units.
    pub fn from_boxes(lr_shape: Vec<usize>, ratio: Vec<usize>, boxes: &[CellBox]) -> Result<Self> {
        let n: usize = lr_shape.iter().product();
        let mut mask = vec![false; n];
        for b in boxes {
            if b.start.len() != lr_shape.len() || b.end.len() != lr_shape.len() {
                return Err(Error::InvalidLayout(format!(
                    "box rank does not match {lr_shape:?}"
                )));
            }
            for a in 0..lr_shape.len() {
                if b.start[a] > b.end[a] || b.end[a] > lr_shape[a] {
                    return Err(Error::InvalidLayout(format!(
                        "box {b:?} outside {lr_shape:?}"
                    )));
                }
            }
            for (c, m) in mask.iter_mut().enumerate() {
                let idx = unravel(c, &lr_shape);
                if (0..idx.len()).all(|a| idx[a] >= b.start[a] && idx[a] < b.end[a]) {
                    *m = true;
                }
            }
        }
        Self::from_hr_mask(lr_shape, ratio, mask)
    }

    /// Boxes given in HR token units; each bound must fall on a cell edge.
    pub fn from_hr_unit_boxes(
        lr_shape: Vec<usize>,
        ratio: Vec<usize>,
        boxes: &[CellBox],
    ) -> Result<Self> {
        if ratio.len() != lr_shape.len() {
            return Err(Error::InvalidLayout(
                "ratio rank does not match shape".into(),
            ));
        }
        let mut cell_boxes = Vec::with_capacity(boxes.len());
        for b in boxes {
            if b.start.len() != ratio.len() || b.end.len() != ratio.len() {
                return Err(Error::InvalidLayout(format!(
                    "box rank does not match {lr_shape:?}"
                )));
            }
            for a in 0..ratio.len() {
                let r = ratio[a].max(1);
                for bound in [b.start[a], b.end[a]] {
                    if bound % r != 0 {
                        return Err(Error::NotAlignable(format!(
                            "bound {bound} on axis {a} is not a multiple of {r}"
                        )));
                    }
                }
            }
            cell_boxes.push(CellBox {
                start: b
                    .start
                    .iter()
                    .zip(&ratio)
                    .map(|(s, r)| s / r.max(&1))
                    .collect(),
                end: b
                    .end
                    .iter()
                    .zip(&ratio)
                    .map(|(e, r)| e / r.max(&1))
                    .collect(),
            });
        }
        Self::from_boxes(lr_shape, ratio, &cell_boxes)
    }

    /// A plain LR grid with unit ratio.
    pub fn single_grid(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        let ratio = vec![1; shape.len()];
        Self::new(shape, ratio, vec![true; n], vec![false; n])
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(s)?;
        file.build()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LayoutFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        file.build()
    }

    pub fn lr_shape(&self) -> &[usize] {
        &self.lr_shape
    }

    pub fn ratio(&self) -> &[usize] {
        &self.ratio
    }

    pub fn num_axes(&self) -> usize {
        self.lr_shape.len()
    }

    pub fn num_cells(&self) -> usize {
        self.lr_cells.len()
    }

    pub fn lr_cells(&self) -> &[bool] {
        &self.lr_cells
    }

    pub fn hr_cells(&self) -> &[bool] {
        &self.hr_cells
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_lr_tokens(&self) -> usize {
        self.num_lr
    }

    /// HR tokens per cell.
    pub fn group_size(&self) -> usize {
        self.ratio.iter().product()
    }

    pub fn num_groups(&self) -> usize {
        (self.tokens.len() - self.num_lr) / self.group_size()
    }

    /// Token index range of HR group `g`.
    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let start = self.num_lr + g * self.group_size();
        start..start + self.group_size()
    }

    /// Physical stride of a token along `axis`.
    pub fn stride(&self, token: usize, axis: usize) -> f64 {
        match self.tokens[token].resolution {
            Resolution::Low => self.ratio[axis] as f64,
            Resolution::High => 1.0,
        }
    }

    /// Fraction of LR cells that are upsampled.
    pub fn hr_cell_fraction(&self) -> f64 {
        self.hr_cells.iter().filter(|&&h| h).count() as f64 / self.num_cells() as f64
    }
}

/// JSON layout description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub lr_shape: Vec<usize>,
    pub ratio: Vec<usize>,
    #[serde(default)]
    pub hr_boxes: Option<Vec<CellBox>>,
    /// Row-major 0/1 flags over LR cells.
    #[serde(default)]
    pub hr_mask: Option<Vec<u8>>,
    /// Units of `hr_boxes`: `"lr"` (default) or `"hr"`.
    #[serde(default)]
    pub units: Option<String>,
}

impl LayoutFile {
    pub fn build(self) -> Result<RegionLayout> {
        match (self.hr_boxes, self.hr_mask) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "give either hr_boxes or hr_mask, not both".into(),
            )),
            (None, Some(mask)) => {
                if mask.iter().any(|&m| m > 1) {
                    return Err(Error::InvalidConfig(
                        "hr_mask entries must be 0 or 1".into(),
                    ));
                }
                RegionLayout::from_hr_mask(
                    self.lr_shape,
                    self.ratio,
                    mask.iter().map(|&m| m == 1).collect(),
                )
            }
            (boxes, None) => {
                let boxes = boxes.unwrap_or_default();
                match self.units.as_deref() {
                    None | Some("lr") => {
                        RegionLayout::from_boxes(self.lr_shape, self.ratio, &boxes)
                    }
                    Some("hr") => {
                        RegionLayout::from_hr_unit_boxes(self.lr_shape, self.ratio, &boxes)
                    }
                    Some(other) => Err(Error::InvalidConfig(format!("unknown units {other:?}"))),
                }
            }
        }
    }
}

/// A single uniform grid for reference attention.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    axes: Vec<(usize, f64)>,
    positions: Vec<f64>,
}

impl TokenGrid {
    /// `axes` are `(length, stride)`; positions are native indices.
    pub fn new(axes: Vec<(usize, f64)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|&(n, s)| n == 0 || !(s > 0.0)) {
            return Err(Error::InvalidLayout(format!("bad grid axes {axes:?}")));
        }
        let shape: Vec<usize> = axes.iter().map(|a| a.0).collect();
        let n: usize = shape.iter().product();
        let positions = (0..n)
            .flat_map(|i| unravel(i, &shape).into_iter().map(|m| m as f64))
            .collect();
        Ok(Self { axes, positions })
    }

    pub fn axes(&self) -> &[(usize, f64)] {
        &self.axes
    }

    pub fn num_axes(&self) -> usize {
        self.axes.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.positions.len() / self.axes.len()
    }

    pub fn position(&self, token: usize) -> &[f64] {
        let a = self.axes.len();
        &self.positions[token * a..(token + 1) * a]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Mean over the group, positioned at the group centroid.
    #[default]
    Mean,
    /// First token of the group, at its own position.
    Stride0,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "stride0" => Ok(PoolMode::Stride0),
            _ => Err(Error::InvalidParameter(format!("unknown pool mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttendOptions {
    pub pool: PoolMode,
    pub params: SchemeParams,
    /// Keep per-query logits and weights.
    pub keep_scores: bool,
}

/// A key as seen by some query: a layout token or a pooled HR group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyId {
    Token(usize),
    Group(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// Key sets; query `i` attends over `contexts[query_context[i]]`.
    pub contexts: Vec<Vec<KeyId>>,
    pub query_context: Vec<usize>,
    /// Scaled pre-softmax logits per query.
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub values: Matrix,
    pub scores: Option<Scores>,
}

/// Keys and values with the positions fed to the rotation.
struct Context {
    ids: Vec<KeyId>,
    k: Matrix,
    v: Matrix,
    /// Scheme positions, `ids.len() x axes`.
    pos: Vec<f64>,
    /// Physical positions, same layout.
    phys: Vec<f64>,
}

struct SchemeSetup {
    rope: RopeLayout,
    /// Positions are `physical / divisor[axis]`.
    divisor: Vec<f64>,
    temperature: f64,
}

fn scheme_setup(
    layout: &RegionLayout,
    scheme: Scheme,
    rope: &RopeLayout,
    params: &SchemeParams,
) -> Result<SchemeSetup> {
    let ratio: Vec<f64> = layout.ratio.iter().map(|&r| r as f64).collect();
    let ones = vec![1.0; ratio.len()];
    Ok(match scheme {
        Scheme::PiLr => SchemeSetup {
            rope: rope.clone(),
            divisor: ratio,
            temperature: 1.0,
        },
        Scheme::PiHr | Scheme::Crpa => SchemeSetup {
            rope: rope.clone(),
            divisor: ones,
            temperature: 1.0,
        },
        Scheme::Ntk => SchemeSetup {
            rope: rope
                .map_schedules(|a, fs| ntk_rescale(fs, &NtkParams::new(ratio[a], fs.dim())?))?,
            divisor: ones,
            temperature: 1.0,
        },
        Scheme::PiNtk => {
            let factors: Vec<(f64, f64)> = layout
                .ratio
                .iter()
                .map(|&r| params.pi_ntk_factors(r))
                .collect();
            SchemeSetup {
                rope: rope.map_schedules(|a, fs| {
                    ntk_rescale(fs, &NtkParams::new(factors[a].1, fs.dim())?)
                })?,
                divisor: factors.iter().map(|f| f.0).collect(),
                temperature: 1.0,
            }
        }
        Scheme::Yarn => {
            let lens: Vec<f64> = layout.lr_shape.iter().map(|&n| n as f64).collect();
            SchemeSetup {
                rope: rope.map_schedules(|a, fs| {
                    let p = YarnParams::new(
                        lens[a],
                        ratio[a],
                        params.yarn_alpha,
                        params.yarn_beta,
                        params.yarn_temperature,
                    )?;
                    yarn_rescale(fs, &p)
                })?,
                divisor: ones,
                temperature: params.yarn_temperature,
            }
        }
    })
}

fn check_inputs(
    layout: &RegionLayout,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    rope: &RopeLayout,
) -> Result<()> {
    let n = layout.num_tokens();
    for m in [q, k, v] {
        if m.rows() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: m.rows(),
            });
        }
    }
    for m in [q, k] {
        if m.cols() != rope.dim() {
            return Err(Error::LengthMismatch {
                expected: rope.dim(),
                actual: m.cols(),
            });
        }
    }
    if rope.num_axes() != layout.num_axes() {
        return Err(Error::LengthMismatch {
            expected: layout.num_axes(),
            actual: rope.num_axes(),
        });
    }
    Ok(())
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (o, &r) in rows.iter().enumerate() {
        out.row_mut(o).copy_from_slice(m.row(r));
    }
    out
}

/// Key set shared by every query: all tokens at `physical / divisor`.
fn full_context(
    layout: &RegionLayout,
    k: Option<&Matrix>,
    v: Option<&Matrix>,
    divisor: &[f64],
) -> Context {
    let axes = layout.num_axes();
    let mut pos = Vec::with_capacity(layout.num_tokens() * axes);
    let mut phys = Vec::with_capacity(layout.num_tokens() * axes);
    for t in &layout.tokens {
        phys.extend_from_slice(&t.physical);
        pos.extend(t.physical.iter().zip(divisor).map(|(p, d)| p / d));
    }
    Context {
        ids: (0..layout.num_tokens()).map(KeyId::Token).collect(),
        k: k.cloned().unwrap_or_else(|| Matrix::zeros(0, 0)),
        v: v.cloned().unwrap_or_else(|| Matrix::zeros(0, 0)),
        pos,
        phys,
    }
}

/// Key set of an LR query under CRPA: LR tokens plus one key per HR group,
/// all in LR stride units.
fn lr_query_context(
    layout: &RegionLayout,
    k: Option<&Matrix>,
    v: Option<&Matrix>,
    pool: PoolMode,
) -> Context {
    let axes = layout.num_axes();
    let ratio: Vec<f64> = layout.ratio.iter().map(|&r| r as f64).collect();
    let groups = layout.num_groups();
    let n = layout.num_lr + groups;
    let mut ids: Vec<KeyId> = (0..layout.num_lr).map(KeyId::Token).collect();
    ids.extend((0..groups).map(KeyId::Group));

    let mut phys = Vec::with_capacity(n * axes);
    for t in &layout.tokens[..layout.num_lr] {
        phys.extend_from_slice(&t.physical);
    }
    for g in 0..groups {
        let range = layout.group_range(g);
        match pool {
            PoolMode::Mean => {
                let len = range.len() as f64;
                for a in 0..axes {
                    phys.push(
                        range
                            .clone()
                            .map(|i| layout.tokens[i].physical[a])
                            .sum::<f64>()
                            / len,
                    );
                }
            }
            PoolMode::Stride0 => phys.extend_from_slice(&layout.tokens[range.start].physical),
        }
    }
    let pos = phys
        .chunks_exact(axes)
        .flat_map(|p| p.iter().zip(&ratio).map(|(x, r)| x / r))
        .collect();

    let pool_rows = |m: &Matrix| {
        let mut out = Matrix::zeros(n, m.cols());
        for i in 0..layout.num_lr {
            out.row_mut(i).copy_from_slice(m.row(i));
        }
        for g in 0..groups {
            let range = layout.group_range(g);
            let row = out.row_mut(layout.num_lr + g);
            match pool {
                PoolMode::Mean => {
                    let len = range.len() as f64;
                    for i in range {
                        row.iter_mut().zip(m.row(i)).for_each(|(o, x)| *o += x);
                    }
                    row.iter_mut().for_each(|o| *o /= len);
                }
                PoolMode::Stride0 => row.copy_from_slice(m.row(range.start)),
            }
        }
        out
    };
    Context {
        ids,
        k: k.map(pool_rows).unwrap_or_else(|| Matrix::zeros(0, 0)),
        v: v.map(pool_rows).unwrap_or_else(|| Matrix::zeros(0, 0)),
        pos,
        phys,
    }
}

fn rotate_rows(m: &Matrix, pos: &[f64], rope: &RopeLayout) -> Matrix {
    let axes = rope.num_axes();
    let mut out = m.clone();
    for i in 0..out.rows() {
        rope.rotate_slice(out.row_mut(i), &pos[i * axes..(i + 1) * axes]);
    }
    out
}

struct BlockOutput {
    values: Matrix,
    logits: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

/// `softmax(q k^T * scale) v` with the row maximum subtracted first.
fn attend_block(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, keep: bool) -> BlockOutput {
    let nk = k.rows();
    let vc = v.cols();
    let mut values = Matrix::zeros(q.rows(), vc);
    if !keep {
        values
            .data_mut()
            .par_chunks_mut(vc.max(1))
            .enumerate()
            .for_each_init(
                || vec![0.0; nk],
                |buf, (i, out)| {
                    softmax_row(q.row(i), k, v, scale, buf, out, false);
                },
            );
        return BlockOutput {
            values,
            logits: Vec::new(),
            weights: Vec::new(),
        };
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..q.rows())
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![0.0; nk];
            let mut out = vec![0.0; vc];
            let logits = softmax_row(q.row(i), k, v, scale, &mut buf, &mut out, true);
            (logits, [buf, out].concat())
        })
        .collect();
    let mut logits = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for (i, (l, wo)) in rows.into_iter().enumerate() {
        values.row_mut(i).copy_from_slice(&wo[nk..]);
        logits.push(l);
        weights.push(wo[..nk].to_vec());
    }
    BlockOutput {
        values,
        logits,
        weights,
    }
}

/// Fills `buf` with normalized weights and `out` with the weighted values;
/// returns the logits when `keep` is set.
fn softmax_row(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    buf: &mut [f64],
    out: &mut [f64],
    keep: bool,
) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (j, b) in buf.iter_mut().enumerate() {
        *b = dot(q, k.row(j)) * scale;
        max = max.max(*b);
    }
    let logits = if keep { buf.to_vec() } else { Vec::new() };
    let mut sum = 0.0;
    for b in buf.iter_mut() {
        *b = (*b - max).exp();
        sum += *b;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, b) in buf.iter_mut().enumerate() {
        *b /= sum;
        let w = *b;
        out.iter_mut().zip(v.row(j)).for_each(|(o, x)| *o += w * x);
    }
    logits
}

/// Attention over a mixed layout with positions handled by `scheme`.
pub fn attend_mixed(
    layout: &RegionLayout,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scheme: Scheme,
    rope: &RopeLayout,
    opts: &AttendOptions,
) -> Result<AttentionOutput> {
    check_inputs(layout, q, k, v, rope)?;
    let setup = scheme_setup(layout, scheme, rope, &opts.params)?;
    let scale = 1.0 / (rope.dim() as f64).sqrt() / setup.temperature;
    let n = layout.num_tokens();
    let axes = layout.num_axes();

    let mut plans: Vec<(Vec<usize>, Context, Vec<f64>)> = Vec::new();
    if scheme == Scheme::Crpa {
        let hr: Vec<usize> = (layout.num_lr..n).collect();
        if !hr.is_empty() {
            let ctx = full_context(layout, Some(k), Some(v), &setup.divisor);
            let qpos = hr
                .iter()
                .flat_map(|&i| layout.tokens[i].physical.clone())
                .collect();
            plans.push((hr, ctx, qpos));
        }
        let lr: Vec<usize> = (0..layout.num_lr).collect();
        if !lr.is_empty() {
            let ctx = lr_query_context(layout, Some(k), Some(v), opts.pool);
            let qpos = lr
                .iter()
                .flat_map(|&i| {
                    let t = &layout.tokens[i];
                    t.physical
                        .iter()
                        .zip(&layout.ratio)
                        .map(|(p, &r)| p / r as f64)
                        .collect::<Vec<_>>()
                })
                .collect();
            plans.push((lr, ctx, qpos));
        }
    } else {
        let ctx = full_context(layout, Some(k), Some(v), &setup.divisor);
        let qpos = ctx.pos.clone();
        plans.push(((0..n).collect(), ctx, qpos));
    }

    let mut values = Matrix::zeros(n, v.cols());
    let mut scores = opts.keep_scores.then(|| Scores {
        contexts: Vec::new(),
        query_context: vec![0; n],
        logits: vec![Vec::new(); n],
        weights: vec![Vec::new(); n],
    });
    for (ci, (queries, ctx, qpos)) in plans.into_iter().enumerate() {
        debug_assert_eq!(qpos.len(), queries.len() * axes);
        let q_rot = rotate_rows(&gather_rows(q, &queries), &qpos, &setup.rope);
        let k_rot = rotate_rows(&ctx.k, &ctx.pos, &setup.rope);
        let block = attend_block(&q_rot, &k_rot, &ctx.v, scale, opts.keep_scores);
        for (o, &i) in queries.iter().enumerate() {
            values.row_mut(i).copy_from_slice(block.values.row(o));
        }
        if let Some(s) = scores.as_mut() {
            for ((&i, l), w) in queries.iter().zip(block.logits).zip(block.weights) {
                s.query_context[i] = ci;
                s.logits[i] = l;
                s.weights[i] = w;
            }
            s.contexts.push(ctx.ids);
        }
    }
    Ok(AttentionOutput { values, scores })
}

/// Plain RoPE attention on one grid, positions at native indices.
pub fn attend_reference(
    grid: &TokenGrid,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    rope: &RopeLayout,
) -> Result<AttentionOutput> {
    attend_reference_with(grid, q, k, v, rope, false)
}

pub fn attend_reference_with(
    grid: &TokenGrid,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    rope: &RopeLayout,
    keep_scores: bool,
) -> Result<AttentionOutput> {
    let n = grid.num_tokens();
    for m in [q, k, v] {
        if m.rows() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: m.rows(),
            });
        }
    }
    for m in [q, k] {
        if m.cols() != rope.dim() {
            return Err(Error::LengthMismatch {
                expected: rope.dim(),
                actual: m.cols(),
            });
        }
    }
    if rope.num_axes() != grid.num_axes() {
        return Err(Error::LengthMismatch {
            expected: grid.num_axes(),
            actual: rope.num_axes(),
        });
    }
    let q_rot = rotate_rows(q, &grid.positions, rope);
    let k_rot = rotate_rows(k, &grid.positions, rope);
    let block = attend_block(
        &q_rot,
        &k_rot,
        v,
        1.0 / (rope.dim() as f64).sqrt(),
        keep_scores,
    );
    let scores = keep_scores.then(|| Scores {
        contexts: vec![(0..n).map(KeyId::Token).collect()],
        query_context: vec![0; n],
        logits: block.logits,
        weights: block.weights,
    });
    Ok(AttentionOutput {
        values: block.values,
        scores,
    })
}

/// Largest `|delta_scheme - delta_physical / S_q|` over all query-key pairs
/// and axes, where `S_q` is the query's stride.
pub fn phase_consistency_error(
    layout: &RegionLayout,
    scheme: Scheme,
    params: &SchemeParams,
    pool: PoolMode,
) -> f64 {
    let axes = layout.num_axes();
    let n = layout.num_tokens();
    let divisor: Vec<f64> = match scheme {
        Scheme::PiLr => layout.ratio.iter().map(|&r| r as f64).collect(),
        Scheme::PiNtk => layout
            .ratio
            .iter()
            .map(|&r| params.pi_ntk_factors(r).0)
            .collect(),
        _ => vec![1.0; axes],
    };
    let mut worst = 0.0f64;
    let mut scan =
        |queries: std::ops::Range<usize>, ctx: &Context, qpos: &dyn Fn(usize, usize) -> f64| {
            for i in queries {
                let t = &layout.tokens[i];
                for j in 0..ctx.ids.len() {
                    for a in 0..axes {
                        let stride = layout.stride(i, a);
                        let d_scheme = ctx.pos[j * axes + a] - qpos(i, a);
                        let d_phys = ctx.phys[j * axes + a] - t.physical[a];
                        worst = worst.max((d_scheme - d_phys / stride).abs());
                    }
                }
            }
        };
    if scheme == Scheme::Crpa {
        let hr_ctx = full_context(layout, None, None, &divisor);
        scan(layout.num_lr..n, &hr_ctx, &|i, a| {
            layout.tokens[i].physical[a]
        });
        let lr_ctx = lr_query_context(layout, None, None, pool);
        scan(0..layout.num_lr, &lr_ctx, &|i, a| {
            layout.tokens[i].physical[a] / layout.ratio[a] as f64
        });
    } else {
        let ctx = full_context(layout, None, None, &divisor);
        scan(0..n, &ctx, &|i, a| {
            layout.tokens[i].physical[a] / divisor[a]
        });
    }
    worst
}
