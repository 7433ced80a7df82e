//! Amplitude-phase decomposition of the RoPE score.
//!
//! For one rotary pair, `q_i^T R(omega_i * delta) k_i = A_i cos(omega_i delta) + B_i sin(omega_i delta)`
//! with `A_i = q_{2i} k_{2i} + q_{2i+1} k_{2i+1}` and
//! `B_i = q_{2i+1} k_{2i} - q_{2i} k_{2i+1}`. Writing `C_i = hypot(A_i, B_i)` and
//! `phi_i = atan2(-B_i, A_i)` turns the full score into the sinusoid mixture
//! `sum_i C_i cos(omega_i delta + phi_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{FrequencySchedule, RopeLayout};

/// One sinusoid of a phase kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelTerm {
    pub omega: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// `(A_i, B_i)` as produced by [`decompose`]; not serialized.
    #[serde(skip)]
    pub raw: Option<(f64, f64)>,
}

impl KernelTerm {
    /// Builds a term from raw cosine/sine coefficients. A zero amplitude
    /// pins the phase to 0 so the output does not depend on `atan2(0, 0)`.
    pub fn from_coefficients(omega: f64, a: f64, b: f64) -> Self {
        let amplitude = a.hypot(b);
        let phase = if amplitude == 0.0 {
            0.0
        } else {
            normalize_phase((-b).atan2(a))
        };
        Self {
            omega,
            amplitude,
            phase,
            raw: Some((a, b)),
        }
    }

    pub fn eval(&self, delta: f64) -> f64 {
        self.amplitude * (self.omega * delta + self.phase).cos()
    }
}

/// Maps `atan2` output into `(-pi, pi]`; `atan2` can return exactly `-pi`.
fn normalize_phase(phi: f64) -> f64 {
    if phi <= -std::f64::consts::PI {
        phi + 2.0 * std::f64::consts::PI
    } else {
        phi
    }
}

/// A head's positional response as a mixture of sinusoids over the offset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseKernel {
    terms: Vec<KernelTerm>,
}

impl PhaseKernel {
    pub fn from_terms(terms: Vec<KernelTerm>) -> Self {
        Self { terms }
    }

    pub fn terms(&self) -> &[KernelTerm] {
        &self.terms
    }

    pub fn eval(&self, delta: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(delta)).sum()
    }

    /// Terms by descending amplitude, ties broken by ascending frequency.
    pub fn dominant_frequencies(&self, top_n: usize) -> Vec<(f64, f64)> {
        let mut terms: Vec<_> = self.terms.iter().map(|t| (t.omega, t.amplitude)).collect();
        terms.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
        terms.truncate(top_n);
        terms
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Decomposes the score of `(q, k)` into one term per rotary pair.
pub fn decompose(q: &[f64], k: &[f64], fs: &FrequencySchedule) -> Result<PhaseKernel> {
    for len in [q.len(), k.len()] {
        if len != fs.dim() {
            return Err(Error::LengthMismatch {
                expected: fs.dim(),
                actual: len,
            });
        }
    }
    let terms = q
        .chunks_exact(2)
        .zip(k.chunks_exact(2))
        .zip(fs.freqs())
        .map(|((qi, ki), &omega)| {
            let a = qi[0] * ki[0] + qi[1] * ki[1];
            let b = qi[1] * ki[0] - qi[0] * ki[1];
            KernelTerm::from_coefficients(omega, a, b)
        })
        .collect();
    Ok(PhaseKernel { terms })
}

/// One kernel per axis group; the cross-axis score is the sum of the
/// per-axis kernels evaluated at their own offsets.
pub fn decompose_multiaxis(q: &[f64], k: &[f64], layout: &RopeLayout) -> Result<Vec<PhaseKernel>> {
    for len in [q.len(), k.len()] {
        if len != layout.dim() {
            return Err(Error::LengthMismatch {
                expected: layout.dim(),
                actual: len,
            });
        }
    }
    layout
        .groups()
        .iter()
        .map(|g| decompose(&q[g.range()], &k[g.range()], &g.schedule))
        .collect()
}

pub fn eval_kernel(kernel: &PhaseKernel, delta: f64) -> f64 {
    kernel.eval(delta)
}

pub fn dominant_frequencies(kernel: &PhaseKernel, top_n: usize) -> Vec<(f64, f64)> {
    kernel.dominant_frequencies(top_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{make_frequencies, score_relative, DEFAULT_BASE};
    use std::f64::consts::FRAC_PI_2;

    fn term(omega: f64, amplitude: f64) -> KernelTerm {
        KernelTerm {
            omega,
            amplitude,
            phase: 0.0,
            raw: None,
        }
    }

    #[test]
    fn aligned_pair() {
        let fs = make_frequencies(2, DEFAULT_BASE).unwrap();
        let kernel = decompose(&[1.0, 0.0], &[1.0, 0.0], &fs).unwrap();
        let t = kernel.terms()[0];
        assert_eq!(t.raw, Some((1.0, 0.0)));
        assert_eq!((t.amplitude, t.phase), (1.0, 0.0));
        for d in [-3.0, 0.0, 0.4, 2.0] {
            assert!((kernel.eval(d) - f64::cos(d)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadrature_pair_is_a_sine() {
        let fs = make_frequencies(2, DEFAULT_BASE).unwrap();
        let (q, k) = ([0.0, 1.0], [1.0, 0.0]);
        let kernel = decompose(&q, &k, &fs).unwrap();
        let t = kernel.terms()[0];
        assert_eq!(t.raw, Some((0.0, 1.0)));
        assert_eq!(t.amplitude, 1.0);
        assert!((t.phase + FRAC_PI_2).abs() < 1e-15);
        for i in -20..=20 {
            let d = i as f64 * 0.37;
            let oracle = score_relative(&q, &k, d, &fs).unwrap();
            assert!((kernel.eval(d) - oracle).abs() < 1e-14);
            assert!((kernel.eval(d) - d.sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_vectors_give_zero_kernel() {
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        let kernel = decompose(&[0.0; 4], &[0.0; 4], &fs).unwrap();
        assert!(kernel
            .terms()
            .iter()
            .all(|t| t.amplitude == 0.0 && t.phase == 0.0));
        assert_eq!(kernel.eval(12.5), 0.0);
        assert_eq!(PhaseKernel::default().eval(3.0), 0.0);
    }

    #[test]
    fn zero_offset_is_dot_product() {
        let fs = make_frequencies(6, DEFAULT_BASE).unwrap();
        let q = [0.3, -0.7, 1.1, 0.2, -0.5, 0.9];
        let k = [1.2, 0.4, -0.6, 0.8, 0.1, -1.3];
        let kernel = decompose(&q, &k, &fs).unwrap();
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((kernel.eval(0.0) - dot).abs() < 1e-14);
    }

    #[test]
    fn ranking() {
        let one = PhaseKernel::from_terms(vec![term(1.0, 0.3)]);
        assert_eq!(one.dominant_frequencies(3), vec![(1.0, 0.3)]);
        let two = PhaseKernel::from_terms(vec![term(1.0, 0.5), term(0.01, 2.0)]);
        assert_eq!(two.dominant_frequencies(2), vec![(0.01, 2.0), (1.0, 0.5)]);
        let tie = PhaseKernel::from_terms(vec![term(1.0, 1.0), term(0.01, 1.0)]);
        assert_eq!(tie.dominant_frequencies(1), vec![(0.01, 1.0)]);
    }

    #[test]
    fn json_records() {
        let kernel = PhaseKernel::from_terms(vec![KernelTerm {
            omega: 1.0,
            amplitude: 2.0,
            phase: -0.5,
            raw: Some((1.0, 1.0)),
        }]);
        let json: serde_json::Value = serde_json::from_str(&kernel.to_json().unwrap()).unwrap();
        assert_eq!(
            json,
            serde_json::json!([{"omega": 1.0, "amplitude": 2.0, "phase": -0.5}])
        );
    }

    #[test]
    fn phase_never_minus_pi() {
        // A < 0, B = +0 gives atan2(-0, A) = -pi
        let t = KernelTerm::from_coefficients(1.0, -1.0, 0.0);
        assert_eq!(t.phase, std::f64::consts::PI);
    }
}
