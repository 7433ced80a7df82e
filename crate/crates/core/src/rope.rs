//! Rotary position embeddings.
//!
//! Channels are rotated in interleaved adjacent pairs `(2i, 2i+1)`; pair `i`
//! turns by `omega_i * p` at position `p`. Positions are real numbers
//! everywhere so that fractional re-indexing composes with rotation.

use crate::error::{Error, Result};

/// Default RoPE base.
pub const DEFAULT_BASE: f64 = 10_000.0;

/// Angular frequencies for one rotary axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySchedule {
    dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl FrequencySchedule {
    /// Geometric schedule `omega_i = base^(-2i/dim)`.
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::InvalidBase(base));
        }
        let freqs = (0..dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        Ok(Self { dim, base, freqs })
    }

    /// Schedule from explicit frequencies. `base` is kept only as metadata
    /// for later rescaling.
    pub fn from_freqs(freqs: Vec<f64>, base: f64) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::DimensionTooSmall(0));
        }
        if let Some(bad) = freqs.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "frequencies must be positive and finite, got {bad}"
            )));
        }
        Ok(Self {
            dim: 2 * freqs.len(),
            base,
            freqs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn num_pairs(&self) -> usize {
        self.freqs.len()
    }

    /// Rotates `vec` in place by position `p`. Length is not checked.
    pub(crate) fn rotate_slice(&self, vec: &mut [f64], p: f64) {
        for (pair, &omega) in vec.chunks_exact_mut(2).zip(&self.freqs) {
            let (s, c) = (omega * p).sin_cos();
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = c * x0 - s * x1;
            pair[1] = s * x0 + c * x1;
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    Ok(())
}

/// `freqs[i] = base^(-2i/dim)`.
pub fn make_frequencies(dim: usize, base: f64) -> Result<FrequencySchedule> {
    FrequencySchedule::new(dim, base)
}

/// A finite scalar position on some reference grid.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AxisPosition(f64);

impl AxisPosition {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::NonFinitePosition(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for AxisPosition {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies `R(p)` to `vec`.
pub fn rotate(vec: &[f64], p: AxisPosition, fs: &FrequencySchedule) -> Result<Vec<f64>> {
    check_len(vec.len(), fs.dim())?;
    let mut out = vec.to_vec();
    fs.rotate_slice(&mut out, p.value());
    Ok(out)
}

/// `<R(p_q) q, R(p_k) k>`.
pub fn score_absolute(
    q: &[f64],
    k: &[f64],
    p_q: AxisPosition,
    p_k: AxisPosition,
    fs: &FrequencySchedule,
) -> Result<f64> {
    let q_rot = rotate(q, p_q, fs)?;
    let k_rot = rotate(k, p_k, fs)?;
    Ok(dot(&q_rot, &k_rot))
}

/// `q^T R(delta) k` with `delta = p_k - p_q`.
pub fn score_relative(q: &[f64], k: &[f64], delta: f64, fs: &FrequencySchedule) -> Result<f64> {
    check_len(q.len(), fs.dim())?;
    check_len(k.len(), fs.dim())?;
    let mut k_rot = k.to_vec();
    fs.rotate_slice(&mut k_rot, delta);
    Ok(dot(q, &k_rot))
}

/// One axis of a multi-axis layout: a contiguous channel group starting at
/// `offset` and rotated with its own schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisGroup {
    pub offset: usize,
    pub schedule: FrequencySchedule,
}

impl AxisGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.schedule.dim()
    }
}

/// Assignment of disjoint channel groups to position axes. Group `a` is
/// rotated by coordinate `a` of a [`MultiAxisPosition`].
#[derive(Debug, Clone, PartialEq)]
pub struct RopeLayout {
    groups: Vec<AxisGroup>,
    dim: usize,
}

impl RopeLayout {
    /// Validates that the groups tile `0..dim` exactly.
    pub fn new(groups: Vec<AxisGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidChannelGroups("no axis groups".into()));
        }
        let mut ranges: Vec<_> = groups.iter().map(AxisGroup::range).collect();
        ranges.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in &ranges {
            if r.start < cursor {
                return Err(Error::InvalidChannelGroups(format!(
                    "group {r:?} overlaps channels below {cursor}"
                )));
            }
            if r.start > cursor {
                return Err(Error::InvalidChannelGroups(format!(
                    "channels {cursor}..{} are not assigned to any axis",
                    r.start
                )));
            }
            cursor = r.end;
        }
        Ok(Self {
            groups,
            dim: cursor,
        })
    }

    /// Single-axis layout covering the whole vector.
    pub fn single(schedule: FrequencySchedule) -> Self {
        let dim = schedule.dim();
        Self {
            groups: vec![AxisGroup {
                offset: 0,
                schedule,
            }],
            dim,
        }
    }

    /// `axes` consecutive groups of `dim_per_axis` channels sharing one base.
    pub fn uniform(axes: usize, dim_per_axis: usize, base: f64) -> Result<Self> {
        if axes == 0 {
            return Err(Error::InvalidChannelGroups("no axis groups".into()));
        }
        let schedule = FrequencySchedule::new(dim_per_axis, base)?;
        let groups = (0..axes)
            .map(|a| AxisGroup {
                offset: a * dim_per_axis,
                schedule: schedule.clone(),
            })
            .collect();
        Self::new(groups)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_axes(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[AxisGroup] {
        &self.groups
    }

    /// Replaces the schedule of every axis, keeping the channel offsets.
    pub fn map_schedules<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &FrequencySchedule) -> Result<FrequencySchedule>,
    {
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(a, g)| {
                Ok(AxisGroup {
                    offset: g.offset,
                    schedule: f(a, &g.schedule)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups)
    }

    pub(crate) fn rotate_slice(&self, vec: &mut [f64], coords: &[f64]) {
        for (g, &p) in self.groups.iter().zip(coords) {
            g.schedule.rotate_slice(&mut vec[g.range()], p);
        }
    }
}

/// Per-axis coordinates, e.g. `(h, w)` or `(t, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAxisPosition {
    coords: Vec<AxisPosition>,
}

impl MultiAxisPosition {
    pub fn new(coords: Vec<AxisPosition>) -> Self {
        Self { coords }
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let coords = values
            .iter()
            .map(|&v| AxisPosition::new(v))
            .collect::<Result<_>>()?;
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[AxisPosition] {
        &self.coords
    }

    pub fn values(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.value()).collect()
    }
}

/// Rotates each axis group by its own coordinate.
pub fn rotate_multiaxis(
    vec: &[f64],
    pos: &MultiAxisPosition,
    layout: &RopeLayout,
) -> Result<Vec<f64>> {
    check_len(vec.len(), layout.dim())?;
    check_len(pos.coords.len(), layout.num_axes())?;
    let mut out = vec.to_vec();
    layout.rotate_slice(&mut out, &pos.values());
    Ok(out)
}

/// Multi-axis relative score: the sum over axis groups of
/// `q_g^T R_g(delta_g) k_g`.
pub fn score_multiaxis_relative(
    q: &[f64],
    k: &[f64],
    deltas: &[f64],
    layout: &RopeLayout,
) -> Result<f64> {
    check_len(q.len(), layout.dim())?;
    check_len(k.len(), layout.dim())?;
    check_len(deltas.len(), layout.num_axes())?;
    let mut k_rot = k.to_vec();
    layout.rotate_slice(&mut k_rot, deltas);
    Ok(dot(q, &k_rot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn pos(v: f64) -> AxisPosition {
        AxisPosition::new(v).unwrap()
    }

    #[test]
    fn frequencies_small_dims() {
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        assert_eq!(fs.freqs()[0], 1.0);
        assert!((fs.freqs()[1] - 0.01).abs() < 1e-16);
        assert_eq!(make_frequencies(2, DEFAULT_BASE).unwrap().freqs(), &[1.0]);
    }

    #[test]
    fn frequencies_dim8_match_decimal_powers() {
        // 10000^(-i/4) = 10^(-i), known exactly in decimal
        let fs = make_frequencies(8, DEFAULT_BASE).unwrap();
        let expected = [1.0, 0.1, 0.01, 0.001];
        for (w, e) in fs.freqs().iter().zip(expected) {
            assert!(((w - e) / e).abs() < 4.0 * f64::EPSILON, "{w} vs {e}");
        }
    }

    #[test]
    fn frequency_errors() {
        assert!(matches!(
            make_frequencies(3, 10.0),
            Err(Error::OddDimension(3))
        ));
        assert!(matches!(
            make_frequencies(0, 10.0),
            Err(Error::DimensionTooSmall(0))
        ));
        assert!(matches!(
            make_frequencies(4, 1.0),
            Err(Error::InvalidBase(_))
        ));
        assert!(matches!(
            make_frequencies(4, 0.5),
            Err(Error::InvalidBase(_))
        ));
        assert!(AxisPosition::new(f64::NAN).is_err());
    }

    #[test]
    fn rotate_examples() {
        let fs = make_frequencies(2, DEFAULT_BASE).unwrap();
        assert_eq!(rotate(&[1.0, 0.0], pos(0.0), &fs).unwrap(), vec![1.0, 0.0]);
        let r = rotate(&[1.0, 0.0], pos(FRAC_PI_2), &fs).unwrap();
        assert!(r[0].abs() < 1e-16 && (r[1] - 1.0).abs() < 1e-16);

        let fs4 = make_frequencies(4, DEFAULT_BASE).unwrap();
        let r = rotate(&[1.0, 0.0, 1.0, 0.0], pos(1.0), &fs4).unwrap();
        let expected = [1f64.cos(), 1f64.sin(), 0.01f64.cos(), 0.01f64.sin()];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            rotate(&[1.0, 0.0, 0.0], pos(1.0), &fs4),
            Err(Error::LengthMismatch {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn score_examples() {
        let fs = make_frequencies(2, DEFAULT_BASE).unwrap();
        let s = score_absolute(&[1.0, 0.0], &[1.0, 0.0], pos(5.0), pos(5.0), &fs).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = score_absolute(&[1.0, 0.0], &[1.0, 0.0], pos(0.0), pos(0.7), &fs).unwrap();
        assert!((s - 0.7f64.cos()).abs() < 1e-15);
        // q = e1, k = e0: R(pi/2) e0 = e1
        let s = score_relative(&[0.0, 1.0], &[1.0, 0.0], FRAC_PI_2, &fs).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let q = [0.3, -1.2];
        let k = [2.0, 0.5];
        assert!((score_relative(&q, &k, 0.0, &fs).unwrap() - dot(&q, &k)).abs() < 1e-15);
    }

    #[test]
    fn layout_validation() {
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        let overlapping = RopeLayout::new(vec![
            AxisGroup {
                offset: 0,
                schedule: fs.clone(),
            },
            AxisGroup {
                offset: 2,
                schedule: fs.clone(),
            },
        ]);
        assert!(matches!(overlapping, Err(Error::InvalidChannelGroups(_))));
        let gap = RopeLayout::new(vec![
            AxisGroup {
                offset: 0,
                schedule: fs.clone(),
            },
            AxisGroup {
                offset: 6,
                schedule: fs.clone(),
            },
        ]);
        assert!(gap.is_err());
        let ok = RopeLayout::uniform(3, 4, DEFAULT_BASE).unwrap();
        assert_eq!(ok.dim(), 12);
    }

    #[test]
    fn multiaxis_is_concatenation_of_single_axis_rotations() {
        let layout = RopeLayout::uniform(2, 4, DEFAULT_BASE).unwrap();
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        let v = [0.5, -1.0, 2.0, 0.25, 1.5, 0.75, -0.5, 3.0];
        let p = MultiAxisPosition::from_values(&[1.0, 2.0]).unwrap();
        let got = rotate_multiaxis(&v, &p, &layout).unwrap();
        let mut expected = rotate(&v[..4], pos(1.0), &fs).unwrap();
        expected.extend(rotate(&v[4..], pos(2.0), &fs).unwrap());
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let zero = MultiAxisPosition::from_values(&[0.0, 0.0]).unwrap();
        assert_eq!(rotate_multiaxis(&v, &zero, &layout).unwrap(), v.to_vec());

        let single = RopeLayout::single(fs.clone());
        let p1 = MultiAxisPosition::from_values(&[0.9]).unwrap();
        assert_eq!(
            rotate_multiaxis(&v[..4], &p1, &single).unwrap(),
            rotate(&v[..4], pos(0.9), &fs).unwrap()
        );
    }

    #[test]
    fn multiaxis_score_is_sum_of_group_scores() {
        let layout = RopeLayout::uniform(2, 4, DEFAULT_BASE).unwrap();
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        let q = [0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.5];
        let k = [1.1, -0.2, 0.3, 0.9, -0.4, 0.6, 0.7, -0.8];
        let total = score_multiaxis_relative(&q, &k, &[1.5, -2.5], &layout).unwrap();
        let parts = score_relative(&q[..4], &k[..4], 1.5, &fs).unwrap()
            + score_relative(&q[4..], &k[4..], -2.5, &fs).unwrap();
        assert!((total - parts).abs() < 1e-14);
    }
}
