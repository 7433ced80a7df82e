//! Raw tensor dumps: a flat little-endian `f32` file plus a JSON sidecar
//! `{"shape": [...], "dim_order": [...], "pair_layout": "interleaved"}`.
//! The sidecar defaults to `<file>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::PairSample;
use crate::tensor::Matrix;

pub const INTERLEAVED: &str = "interleaved";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    #[serde(default)]
    pub dim_order: Vec<String>,
    #[serde(default = "default_pair_layout")]
    pub pair_layout: String,
}

fn default_pair_layout() -> String {
    INTERLEAVED.to_string()
}

impl Sidecar {
    pub fn new(shape: Vec<usize>, dim_order: Vec<String>) -> Self {
        Self {
            shape,
            dim_order,
            pair_layout: default_pair_layout(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn default_sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A validated dump promoted to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub sidecar: Sidecar,
    pub data: Vec<f64>,
}

impl TensorDump {
    pub fn shape(&self) -> &[usize] {
        &self.sidecar.shape
    }

    /// Rank-2 `[n, d]` dump as `n` vectors.
    pub fn into_vectors(self) -> Result<Vec<Vec<f64>>> {
        match self.sidecar.shape[..] {
            [n, d] => Ok((0..n)
                .map(|i| self.data[i * d..(i + 1) * d].to_vec())
                .collect()),
            _ => Err(Error::UnsupportedDump(format!(
                "expected rank-2 [n, d] vectors, got shape {:?}",
                self.sidecar.shape
            ))),
        }
    }

    /// Rank-3 `[n, 2, d]` dump, second axis selecting query or key.
    pub fn into_pairs(self) -> Result<Vec<PairSample>> {
        match self.sidecar.shape[..] {
            [n, 2, d] => Ok((0..n)
                .map(|i| {
                    let base = i * 2 * d;
                    PairSample::new(
                        self.data[base..base + d].to_vec(),
                        self.data[base + d..base + 2 * d].to_vec(),
                    )
                })
                .collect()),
            _ => Err(Error::UnsupportedDump(format!(
                "expected rank-3 [n, 2, d] pairs, got shape {:?}",
                self.sidecar.shape
            ))),
        }
    }

    /// Projection weights, one matrix `[d, model_dim]` per head. Rank 2 is a
    /// single head; rank 3 is `[2, d, m]` (query, key); rank 4 is
    /// `[heads, 2, d, m]`. `which` picks query (0) or key (1).
    pub fn into_weights(self, which: usize) -> Result<Vec<Matrix>> {
        if which > 1 {
            return Err(Error::InvalidParameter(format!(
                "weight selector must be 0 or 1, got {which}"
            )));
        }
        let shape = self.sidecar.shape.clone();
        let take = |offset: usize, d: usize, m: usize| {
            Matrix::new(d, m, self.data[offset..offset + d * m].to_vec())
        };
        match shape[..] {
            [d, m] => Ok(vec![take(0, d, m)?]),
            [2, d, m] => Ok(vec![take(which * d * m, d, m)?]),
            [h, 2, d, m] => (0..h)
                .map(|i| take((2 * i + which) * d * m, d, m))
                .collect(),
            _ => Err(Error::UnsupportedDump(format!(
                "cannot read weights from shape {shape:?}"
            ))),
        }
    }
}

/// Reads and validates a dump. Only the interleaved pair layout is accepted.
pub fn ingest_tensor_dump(path: &Path, sidecar: Option<&Path>) -> Result<TensorDump> {
    let side_path = sidecar
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_sidecar_path(path));
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.pair_layout != INTERLEAVED {
        return Err(Error::UnknownPairLayout(sidecar.pair_layout));
    }
    if !sidecar.dim_order.is_empty() && sidecar.dim_order.len() != sidecar.shape.len() {
        return Err(Error::UnsupportedDump(format!(
            "dim_order has {} names for rank {}",
            sidecar.dim_order.len(),
            sidecar.shape.len()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.num_elements() * 4;
    if bytes.len() != expected {
        return Err(Error::ByteCountMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(TensorDump { sidecar, data })
}

/// Writes `data` and its sidecar (to `<path>.json` unless given).
pub fn write_tensor_dump(
    path: &Path,
    sidecar_path: Option<&Path>,
    sidecar: &Sidecar,
    data: &[f32],
) -> Result<()> {
    if data.len() != sidecar.num_elements() {
        return Err(Error::LengthMismatch {
            expected: sidecar.num_elements(),
            actual: data.len(),
        });
    }
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_sidecar_path(path));
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_four_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let data: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        write_tensor_dump(&path, None, &Sidecar::new(vec![2, 4], vec![]), &data).unwrap();
        let vecs = ingest_tensor_dump(&path, None)
            .unwrap()
            .into_vectors()
            .unwrap();
        assert_eq!(
            vecs,
            vec![vec![0.0, 0.5, 1.0, 1.5], vec![2.0, 2.5, 3.0, 3.5]]
        );
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_tensor_dump(&path, None, &Sidecar::new(vec![2, 4], vec![]), &[0.0; 8]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..30]).unwrap();
        let err = ingest_tensor_dump(&path, None).unwrap_err();
        assert!(err.to_string().contains("byte count mismatch"));
        assert!(err.is_input_error());
    }

    #[test]
    fn unknown_pair_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut side = Sidecar::new(vec![1, 2], vec![]);
        side.pair_layout = "half".into();
        write_tensor_dump(&path, None, &side, &[1.0, 2.0]).unwrap();
        assert!(matches!(
            ingest_tensor_dump(&path, None),
            Err(Error::UnknownPairLayout(_))
        ));
    }

    #[test]
    fn missing_sidecar_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, [0u8; 8]).unwrap();
        let err = ingest_tensor_dump(&path, None).unwrap_err();
        assert!(err.is_input_error());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let side_path = dir.path().join("meta.json");
        let data = [
            1.0e-38f32,
            -0.0,
            f32::MAX,
            3.14159,
            -2.5e7,
            f32::MIN_POSITIVE,
        ];
        let side = Sidecar::new(vec![3, 2], vec!["row".into(), "col".into()]);
        write_tensor_dump(&path, Some(&side_path), &side, &data).unwrap();
        let back = ingest_tensor_dump(&path, Some(&side_path)).unwrap();
        assert_eq!(back.sidecar, side);
        for (a, b) in data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn pairs_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let data: Vec<f32> = (0..8).map(|i| i as f32).collect();
        write_tensor_dump(&path, None, &Sidecar::new(vec![2, 2, 2], vec![]), &data).unwrap();
        let pairs = ingest_tensor_dump(&path, None)
            .unwrap()
            .into_pairs()
            .unwrap();
        assert_eq!(pairs[1].q, vec![4.0, 5.0]);
        assert_eq!(pairs[1].k, vec![6.0, 7.0]);

        let w = ingest_tensor_dump(&path, None)
            .unwrap()
            .into_weights(1)
            .unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].row(0), &[4.0, 5.0]);
    }
}
