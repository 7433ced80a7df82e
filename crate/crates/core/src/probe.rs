//! Head probing: mean cosine curves over relative offset and the
//! rotary-pair alignment score of projection weights.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{dot, FrequencySchedule};
use crate::tensor::Matrix;

/// Heads scoring above this are classified as position dominated.
pub const RDS_THRESHOLD: f64 = 0.085;

pub const DEFAULT_SAMPLE_COUNT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairSample {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub head: Option<usize>,
}

impl PairSample {
    pub fn new(q: Vec<f64>, k: Vec<f64>) -> Self {
        Self {
            q,
            k,
            layer: None,
            head: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    T,
    H,
    W,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::T => "t",
            Axis::H => "h",
            Axis::W => "w",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(Axis::T),
            "h" => Ok(Axis::H),
            "w" => Ok(Axis::W),
            _ => Err(Error::InvalidParameter(format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaCurve {
    pub axis: Axis,
    pub deltas: Vec<f64>,
    pub means: Vec<f64>,
    pub sample_count: usize,
    pub timestep: Option<i64>,
}

impl DeltaCurve {
    /// Offset with the largest mean; the first one on ties.
    pub fn argmax(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (&d, &m) in self.deltas.iter().zip(&self.means) {
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((d, m));
            }
        }
        best.map(|b| b.0)
    }

    pub fn value_at(&self, delta: f64) -> Option<f64> {
        self.deltas
            .iter()
            .position(|&d| d == delta)
            .map(|i| self.means[i])
    }

    /// Smallest positive offset at which the curve has fallen to half of
    /// its value at zero; `None` if zero is not sampled or it never does.
    pub fn half_max_width(&self) -> Option<f64> {
        let half = self.value_at(0.0)? / 2.0;
        let mut pts: Vec<(f64, f64)> = self
            .deltas
            .iter()
            .zip(&self.means)
            .filter(|(d, _)| **d > 0.0)
            .map(|(&d, &m)| (d, m))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.into_iter().find(|&(_, m)| m <= half).map(|p| p.0)
    }
}

/// Integer offsets `-range..=range`.
pub fn delta_grid(range: i64) -> Vec<f64> {
    (-range..=range).map(|d| d as f64).collect()
}

fn normalized(v: &[f64], sample: usize) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite entry in sample {sample}"
        )));
    }
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNormSample(sample));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Mean over samples of `<q/|q|, R(delta) k/|k|>` at every offset.
pub fn kappa_curve(
    samples: &[PairSample],
    fs: &FrequencySchedule,
    deltas: &[f64],
    axis: Axis,
) -> Result<DeltaCurve> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter(
            "kappa needs at least one sample".into(),
        ));
    }
    let mut unit = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for len in [s.q.len(), s.k.len()] {
            if len != fs.dim() {
                return Err(Error::LengthMismatch {
                    expected: fs.dim(),
                    actual: len,
                });
            }
        }
        unit.push((normalized(&s.q, i)?, normalized(&s.k, i)?));
    }
    let n = unit.len() as f64;
    let means = deltas
        .par_iter()
        .map(|&d| {
            let mut k_rot = vec![0.0; fs.dim()];
            let total: f64 = unit
                .iter()
                .map(|(q, k)| {
                    k_rot.copy_from_slice(k);
                    fs.rotate_slice(&mut k_rot, d);
                    dot(q, &k_rot)
                })
                .sum();
            (total / n).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(DeltaCurve {
        axis,
        deltas: deltas.to_vec(),
        means,
        sample_count: samples.len(),
        timestep: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub rds: f64,
    pub is_rope_dominant: bool,
}

/// `(2/d) sum_i |cos(row_{2i}, row_{2i+1})|` over the rows of a projection.
pub fn rds_score(weights: &Matrix, threshold: f64) -> Result<HeadStats> {
    let d = weights.rows();
    if d == 0 || d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let norms: Vec<f64> = weights.iter_rows().map(|r| dot(r, r)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroRow(i));
    }
    let total: f64 = (0..d / 2)
        .map(|i| {
            // one square root of the product rounds better than two
            let c = dot(weights.row(2 * i), weights.row(2 * i + 1))
                / (norms[2 * i] * norms[2 * i + 1]).sqrt();
            c.abs().min(1.0)
        })
        .sum();
    let rds = 2.0 * total / d as f64;
    Ok(HeadStats {
        rds,
        is_rope_dominant: rds > threshold,
    })
}

pub const CURVE_COLUMNS: [&str; 5] = ["axis", "delta", "kappa", "n", "timestep"];

/// Writes long-form CSV rows sorted by axis, then offset. `comment` lines
/// are prefixed with `#` and written first.
pub fn export_curves<W: Write>(
    curves: &[DeltaCurve],
    comment: Option<&str>,
    mut out: W,
) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<curves>", e))?;
        }
    }
    let mut rows: Vec<(Axis, Option<i64>, f64, f64, usize)> = curves
        .iter()
        .flat_map(|c| {
            c.deltas
                .iter()
                .zip(&c.means)
                .map(move |(&d, &m)| (c.axis, c.timestep, d, m, c.sample_count))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for (axis, ts, d, m, n) in rows {
        w.write_record([
            axis.to_string(),
            d.to_string(),
            m.to_string(),
            n.to_string(),
            ts.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curves>", e))?;
    Ok(())
}

/// Reads curves written by [`export_curves`], one per `(axis, timestep)`.
pub fn import_curves<R: Read>(input: R) -> Result<Vec<DeltaCurve>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CURVE_COLUMNS {
        return Err(Error::InvalidConfig(format!(
            "unexpected curve header {header:?}"
        )));
    }
    let mut curves: Vec<DeltaCurve> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidConfig(format!("bad {what} in curve row {rec:?}"));
        let axis: Axis = rec[0].parse().map_err(|_| bad("axis"))?;
        let delta: f64 = rec[1].parse().map_err(|_| bad("delta"))?;
        let kappa: f64 = rec[2].parse().map_err(|_| bad("kappa"))?;
        let n: usize = rec[3].parse().map_err(|_| bad("n"))?;
        let timestep = match &rec[4] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("timestep"))?),
        };
        match curves.last_mut() {
            Some(c) if c.axis == axis && c.timestep == timestep => {
                c.deltas.push(delta);
                c.means.push(kappa);
            }
            _ => curves.push(DeltaCurve {
                axis,
                deltas: vec![delta],
                means: vec![kappa],
                sample_count: n,
                timestep,
            }),
        }
    }
    Ok(curves)
}
