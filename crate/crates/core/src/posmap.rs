//! Position remapping schemes applied before rotation.
//!
//! Two families live here. Piecewise-affine unification puts LR and HR
//! tokens on one shared index axis (`phi(p) = a_r + s_r (p - b_r)` inside
//! region `r`). Frequency rescaling (NTK, YaRN) leaves positions alone and
//! changes the schedule instead. CRPA is the odd one out: it re-indexes each
//! key onto the stride of the query it is compared against, so there is no
//! single global map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{AxisPosition, FrequencySchedule};
use crate::tensor::Matrix;

/// Maximum allowed jump of a piecewise map across a region seam.
pub const CONTINUITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Low,
    High,
}

/// One region of a piecewise-affine map. Tokens of the region have native
/// indices `start, start + 1, ..., start + len - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub id: usize,
    pub resolution: Resolution,
    /// Original start index `b_r`, in the region's native units.
    pub start: f64,
    pub len: usize,
    /// Per-region scale `s_r`.
    pub scale: f64,
    /// Continuity offset `a_r`.
    pub offset: f64,
    /// Physical distance between adjacent tokens of this region.
    pub native_stride: f64,
}

impl RegionSpec {
    pub fn map(&self, native: f64) -> f64 {
        self.offset + self.scale * (native - self.start)
    }

    /// Mapped position one past the last token.
    pub fn mapped_end(&self) -> f64 {
        self.offset + self.scale * self.len as f64
    }
}

/// A token after mapping, with the physical coordinate it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedToken {
    pub region: usize,
    pub resolution: Resolution,
    pub native: f64,
    pub physical: f64,
    pub stride: f64,
    pub mapped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseMap {
    regions: Vec<RegionSpec>,
}

impl PiecewiseMap {
    /// Validates positivity and continuity across every seam.
    pub fn from_regions(regions: Vec<RegionSpec>) -> Result<Self> {
        for r in &regions {
            if !(r.scale > 0.0) || !(r.native_stride > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "region {} needs positive scale and stride",
                    r.id
                )));
            }
        }
        for (i, pair) in regions.windows(2).enumerate() {
            let gap = pair[1].offset - pair[0].mapped_end();
            if gap.abs() > CONTINUITY_TOL {
                return Err(Error::MapNotContinuous { region: i + 1, gap });
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    /// Maps a native index of region `region`.
    pub fn map(&self, region: usize, native: f64) -> f64 {
        self.regions[region].map(native)
    }

    pub fn tokens(&self) -> Vec<MappedToken> {
        self.regions
            .iter()
            .enumerate()
            .flat_map(|(ri, r)| {
                (0..r.len).map(move |j| {
                    let native = r.start + j as f64;
                    MappedToken {
                        region: ri,
                        resolution: r.resolution,
                        native,
                        physical: native * r.native_stride,
                        stride: r.native_stride,
                        mapped: r.map(native),
                    }
                })
            })
            .collect()
    }

    pub fn mapped_positions(&self) -> Vec<f64> {
        self.tokens().iter().map(|t| t.mapped).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnifyMode {
    /// LR grid; HR tokens get fractional indices.
    Fractional,
    /// HR grid; LR zones are stretched so every index is an integer.
    Integerized,
}

/// A run of consecutive LR cells, optionally upsampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub resolution: Resolution,
    pub cells: usize,
}

impl Segment {
    pub fn low(cells: usize) -> Self {
        Self {
            resolution: Resolution::Low,
            cells,
        }
    }

    pub fn high(cells: usize) -> Self {
        Self {
            resolution: Resolution::High,
            cells,
        }
    }
}

/// Builds the unifying map for a 1D sequence of LR/HR segments, where each
/// HR cell holds `ratio` tokens. Physical units are HR strides.
pub fn build_piecewise_map(
    segments: &[Segment],
    ratio: usize,
    mode: UnifyMode,
) -> Result<PiecewiseMap> {
    if ratio == 0 {
        return Err(Error::InvalidParameter("ratio must be positive".into()));
    }
    let r = ratio as f64;
    let unit = match mode {
        UnifyMode::Fractional => r,
        UnifyMode::Integerized => 1.0,
    };
    let mut regions = Vec::with_capacity(segments.len());
    let mut cell = 0usize;
    for (id, seg) in segments.iter().enumerate() {
        let (start, len, stride) = match seg.resolution {
            Resolution::Low => (cell as f64, seg.cells, r),
            Resolution::High => ((cell * ratio) as f64, seg.cells * ratio, 1.0),
        };
        regions.push(RegionSpec {
            id,
            resolution: seg.resolution,
            start,
            len,
            scale: stride / unit,
            offset: start * stride / unit,
            native_stride: stride,
        });
        cell += seg.cells;
    }
    PiecewiseMap::from_regions(regions)
}

/// Query and key strides; `ratio = key_stride / query_stride`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrideRatio {
    query_stride: f64,
    key_stride: f64,
}

impl StrideRatio {
    pub fn new(query_stride: f64, key_stride: f64) -> Result<Self> {
        for s in [query_stride, key_stride] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "stride must be positive, got {s}"
                )));
            }
        }
        Ok(Self {
            query_stride,
            key_stride,
        })
    }

    pub fn query_stride(&self) -> f64 {
        self.query_stride
    }

    pub fn key_stride(&self) -> f64 {
        self.key_stride
    }

    pub fn ratio(&self) -> f64 {
        self.key_stride / self.query_stride
    }
}

/// Expresses a key's native index in query-stride units.
pub fn crpa_remap(p_k: AxisPosition, sr: &StrideRatio) -> AxisPosition {
    // product of finite values with a finite positive ratio stays finite
    AxisPosition::new(sr.ratio() * p_k.value()).expect("finite remap")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtkParams {
    extension: f64,
    lambda: f64,
    dim: usize,
}

impl NtkParams {
    /// `lambda = s^(d / (d - 2))`.
    pub fn new(extension: f64, dim: usize) -> Result<Self> {
        if dim == 2 {
            return Err(Error::NtkUndefined);
        }
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::OddDimension(dim));
        }
        if !(extension > 0.0) || !extension.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "NTK extension factor must be positive, got {extension}"
            )));
        }
        let d = dim as f64;
        Ok(Self {
            extension,
            lambda: extension.powf(d / (d - 2.0)),
            dim,
        })
    }

    pub fn extension(&self) -> f64 {
        self.extension
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Replaces the base by `lambda * base`.
pub fn ntk_rescale(fs: &FrequencySchedule, p: &NtkParams) -> Result<FrequencySchedule> {
    if fs.dim() == 2 {
        return Err(Error::NtkUndefined);
    }
    if p.dim != fs.dim() {
        return Err(Error::LengthMismatch {
            expected: fs.dim(),
            actual: p.dim,
        });
    }
    FrequencySchedule::new(fs.dim(), p.lambda * fs.base())
}

pub const YARN_DEFAULT_ALPHA: f64 = 1.0;
pub const YARN_DEFAULT_BETA: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YarnParams {
    pub train_length: f64,
    pub extension: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl YarnParams {
    pub fn new(
        train_length: f64,
        extension: f64,
        alpha: f64,
        beta: f64,
        temperature: f64,
    ) -> Result<Self> {
        if !(alpha < beta) {
            return Err(Error::InvalidParameter(format!(
                "YaRN needs alpha < beta, got {alpha} >= {beta}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(train_length > 0.0) || !(extension > 0.0) {
            return Err(Error::InvalidParameter(
                "train length and extension factor must be positive".into(),
            ));
        }
        Ok(Self {
            train_length,
            extension,
            alpha,
            beta,
            temperature,
        })
    }

    pub fn with_defaults(train_length: f64, extension: f64) -> Result<Self> {
        Self::new(
            train_length,
            extension,
            YARN_DEFAULT_ALPHA,
            YARN_DEFAULT_BETA,
            1.0,
        )
    }

    /// Cycles completed over the training length, `L omega / 2 pi`.
    pub fn cycles(&self, omega: f64) -> f64 {
        self.train_length * omega / (2.0 * std::f64::consts::PI)
    }

    pub fn gamma(&self, cycles: f64) -> f64 {
        yarn_gamma(cycles, self.alpha, self.beta)
    }
}

/// Ramp: 1 above `beta`, 0 below `alpha`, linear in between.
pub fn yarn_gamma(r: f64, alpha: f64, beta: f64) -> f64 {
    if r > beta {
        1.0
    } else if r < alpha {
        0.0
    } else {
        (r - alpha) / (beta - alpha)
    }
}

/// `omega' = gamma omega + (1 - gamma) omega / s` per frequency.
pub fn yarn_rescale(fs: &FrequencySchedule, p: &YarnParams) -> Result<FrequencySchedule> {
    let freqs = fs
        .freqs()
        .iter()
        .map(|&w| {
            let g = p.gamma(p.cycles(w));
            g * w + (1.0 - g) * w / p.extension
        })
        .collect();
    FrequencySchedule::from_freqs(freqs, fs.base())
}

/// Divides every pre-softmax logit by the temperature.
pub fn yarn_temperature(scores: &Matrix, p: &YarnParams) -> Matrix {
    let mut out = scores.clone();
    out.data_mut().iter_mut().for_each(|x| *x /= p.temperature);
    out
}

/// Position handling used inside an attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "pi-lr")]
    PiLr,
    #[serde(rename = "pi-hr")]
    PiHr,
    #[serde(rename = "ntk")]
    Ntk,
    #[serde(rename = "pi-ntk")]
    PiNtk,
    #[serde(rename = "yarn")]
    Yarn,
    #[serde(rename = "crpa")]
    Crpa,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Crpa,
        Scheme::PiLr,
        Scheme::PiHr,
        Scheme::Ntk,
        Scheme::PiNtk,
        Scheme::Yarn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PiLr => "pi-lr",
            Scheme::PiHr => "pi-hr",
            Scheme::Ntk => "ntk",
            Scheme::PiNtk => "pi-ntk",
            Scheme::Yarn => "yarn",
            Scheme::Crpa => "crpa",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme {s:?}")))
    }
}

/// Tunables of the baseline schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeParams {
    pub yarn_alpha: f64,
    pub yarn_beta: f64,
    pub yarn_temperature: f64,
    /// Linear position factor of PI+NTK at an upsampling ratio of 2.
    pub pi_ntk_linear: f64,
    /// NTK extension factor of PI+NTK at an upsampling ratio of 2.
    pub pi_ntk_factor: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            yarn_alpha: YARN_DEFAULT_ALPHA,
            yarn_beta: YARN_DEFAULT_BETA,
            yarn_temperature: 1.0,
            pi_ntk_linear: 1.5,
            pi_ntk_factor: 1.333,
        }
    }
}

impl SchemeParams {
    /// PI+NTK factors for an axis with the given upsampling ratio. Both
    /// factors are given for ratio 2 and scale as powers of `log2(ratio)`,
    /// so ratio 1 maps to `(1, 1)`.
    pub fn pi_ntk_factors(&self, ratio: usize) -> (f64, f64) {
        let e = (ratio as f64).log2();
        (self.pi_ntk_linear.powf(e), self.pi_ntk_factor.powf(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{make_frequencies, DEFAULT_BASE};

    fn toy(mode: UnifyMode) -> PiecewiseMap {
        build_piecewise_map(
            &[Segment::low(3), Segment::high(2), Segment::low(4)],
            2,
            mode,
        )
        .unwrap()
    }

    #[test]
    fn toy_sequences() {
        assert_eq!(
            toy(UnifyMode::Fractional).mapped_positions(),
            vec![0.0, 1.0, 2.0, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0]
        );
        assert_eq!(
            toy(UnifyMode::Integerized).mapped_positions(),
            vec![0.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0, 14.0, 16.0]
        );
    }

    #[test]
    fn identity_region() {
        let map = PiecewiseMap::from_regions(vec![RegionSpec {
            id: 0,
            resolution: Resolution::Low,
            start: 0.0,
            len: 5,
            scale: 1.0,
            offset: 0.0,
            native_stride: 1.0,
        }])
        .unwrap();
        assert_eq!(map.mapped_positions(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn discontinuity_rejected() {
        let mut regions = toy(UnifyMode::Fractional).regions().to_vec();
        regions[1].offset += 0.25;
        let err = PiecewiseMap::from_regions(regions).unwrap_err();
        assert!(err.to_string().contains("map not continuous"));
    }

    #[test]
    fn seams_are_continuous() {
        for mode in [UnifyMode::Fractional, UnifyMode::Integerized] {
            let map = toy(mode);
            for w in map.regions().windows(2) {
                assert!((w[0].mapped_end() - w[1].offset).abs() <= CONTINUITY_TOL);
            }
        }
    }

    /// Exhaustive scan over all cross-region pairs of the toy layout.
    fn max_cross_region_error(map: &PiecewiseMap) -> f64 {
        let tokens = map.tokens();
        let mut worst = 0.0f64;
        for q in &tokens {
            for k in &tokens {
                if q.resolution == k.resolution {
                    continue;
                }
                let mapped = k.mapped - q.mapped;
                let physical = (k.physical - q.physical) / q.stride;
                worst = worst.max((mapped - physical).abs());
            }
        }
        worst
    }

    #[test]
    fn both_unifications_alias() {
        assert!(max_cross_region_error(&toy(UnifyMode::Fractional)) >= 0.5);
        assert!(max_cross_region_error(&toy(UnifyMode::Integerized)) >= 0.5);
    }

    #[test]
    fn crpa_remap_examples() {
        let lift = StrideRatio::new(1.0, 2.0).unwrap();
        let lifted: Vec<f64> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&p| crpa_remap(AxisPosition::new(p).unwrap(), &lift).value())
            .collect();
        assert_eq!(lifted, vec![0.0, 2.0, 4.0]);
        let same = StrideRatio::new(3.0, 3.0).unwrap();
        assert_eq!(
            crpa_remap(AxisPosition::new(7.25).unwrap(), &same).value(),
            7.25
        );
        let compress = StrideRatio::new(2.0, 1.0).unwrap();
        assert_eq!(
            crpa_remap(AxisPosition::new(6.0).unwrap(), &compress).value(),
            3.0
        );
        assert!(StrideRatio::new(0.0, 1.0).is_err());
    }

    #[test]
    fn ntk_examples() {
        let fs = make_frequencies(4, DEFAULT_BASE).unwrap();
        let unchanged = ntk_rescale(&fs, &NtkParams::new(1.0, 4).unwrap()).unwrap();
        assert_eq!(unchanged.freqs(), fs.freqs());

        let p = NtkParams::new(2.0, 4).unwrap();
        assert_eq!(p.lambda(), 4.0);
        let scaled = ntk_rescale(&fs, &p).unwrap();
        assert_eq!(scaled.freqs()[0], 1.0);
        // (4 * 10000)^(-1/2) = 1 / 200
        assert!((scaled.freqs()[1] - 0.005).abs() < 1e-17);

        assert!(matches!(NtkParams::new(2.0, 2), Err(Error::NtkUndefined)));
        let fs2 = make_frequencies(2, DEFAULT_BASE).unwrap();
        assert!(matches!(
            ntk_rescale(&fs2, &NtkParams::new(2.0, 4).unwrap()),
            Err(Error::NtkUndefined)
        ));
    }

    #[test]
    fn yarn_branches() {
        let fs = FrequencySchedule::from_freqs(vec![1.0, 0.1, 0.01], DEFAULT_BASE).unwrap();
        // L = 2 pi makes the cycle count equal to omega
        let p = YarnParams::new(2.0 * std::f64::consts::PI, 4.0, 0.05, 0.5, 1.0).unwrap();
        let out = yarn_rescale(&fs, &p).unwrap();
        assert_eq!(out.freqs()[0], 1.0);
        assert!((out.freqs()[2] - 0.0025).abs() < 1e-18);
        let g = (0.1 - 0.05) / 0.45;
        assert!((out.freqs()[1] - (g * 0.1 + (1.0 - g) * 0.025)).abs() < 1e-16);

        // midpoint of the ramp is an even blend
        let mid = YarnParams::new(2.0 * std::f64::consts::PI, 3.0, 0.0, 2.0, 1.0).unwrap();
        let fs_mid = FrequencySchedule::from_freqs(vec![1.0], DEFAULT_BASE).unwrap();
        let w = yarn_rescale(&fs_mid, &mid).unwrap().freqs()[0];
        assert!((mid.cycles(1.0) - 1.0).abs() < 1e-15);
        assert!((w - (0.5 + 0.5 / 3.0)).abs() < 1e-15);

        assert!(YarnParams::new(10.0, 2.0, 3.0, 3.0, 1.0).is_err());
        assert!(YarnParams::new(10.0, 2.0, 1.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn temperature() {
        let logits = Matrix::new(1, 2, vec![2.0, 4.0]).unwrap();
        let p1 = YarnParams::new(10.0, 2.0, 1.0, 32.0, 1.0).unwrap();
        assert_eq!(yarn_temperature(&logits, &p1), logits);
        let p2 = YarnParams::new(10.0, 2.0, 1.0, 32.0, 2.0).unwrap();
        assert_eq!(yarn_temperature(&logits, &p2).data(), &[1.0, 2.0]);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("linear".parse::<Scheme>().is_err());
        assert_eq!(SchemeParams::default().pi_ntk_factors(2), (1.5, 1.333));
        assert_eq!(SchemeParams::default().pi_ntk_factors(1), (1.0, 1.0));
    }
}
