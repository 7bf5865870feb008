//! Sparse matrices in sorted coordinate format.

use crate::error::{DreamError, Result};
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Sparse matrix as a sorted coordinate list: entries ordered by (row, col),
/// no duplicates, finite weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f32)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(u32, u32, f32)>) -> Result<Self> {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(DreamError::Internal(format!(
                    "duplicate sparse entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        for &(r, c, v) in &entries {
            if r as usize >= rows || c as usize >= cols {
                return Err(DreamError::Dimension {
                    context: "sparse entry out of range".into(),
                    expected: rows.max(cols),
                    found: r.max(c) as usize,
                });
            }
            if !v.is_finite() {
                return Err(DreamError::Internal(format!(
                    "non-finite sparse weight at ({r}, {c})"
                )));
            }
        }
        Ok(SparseMatrix { rows, cols, entries })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Sparse x dense product. Accumulation follows the sorted coordinate
    /// order, so results are deterministic.
    pub fn spmm(&self, dense: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != dense.rows {
            return Err(DreamError::Dimension {
                context: "spmm".into(),
                expected: self.cols,
                found: dense.rows,
            });
        }
        let d = dense.cols;
        let mut out = vec![0.0f64; self.rows * d];
        for &(r, c, w) in &self.entries {
            let src = &dense.data[c as usize * d..(c as usize + 1) * d];
            let dst = &mut out[r as usize * d..(r as usize + 1) * d];
            let wf = w as f64;
            for j in 0..d {
                dst[j] += wf * src[j] as f64;
            }
        }
        Tensor2D::from_data(self.rows, d, out.into_iter().map(|v| v as f32).collect())
    }

    /// `self * dense` over f64 buffers (`dense` is `cols x d`, row-major).
    pub fn spmm_f64(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        debug_assert_eq!(dense.len(), self.cols * d);
        debug_assert_eq!(out.len(), self.rows * d);
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(r, c, w) in &self.entries {
            let src = &dense[c as usize * d..(c as usize + 1) * d];
            let dst = &mut out[r as usize * d..(r as usize + 1) * d];
            let wf = w as f64;
            for j in 0..d {
                dst[j] += wf * src[j];
            }
        }
    }

    /// `self^T * dense` over f64 buffers (`dense` is `rows x d`).
    pub fn spmm_t_f64(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        debug_assert_eq!(dense.len(), self.rows * d);
        debug_assert_eq!(out.len(), self.cols * d);
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(r, c, w) in &self.entries {
            let src = &dense[r as usize * d..(r as usize + 1) * d];
            let dst = &mut out[c as usize * d..(c as usize + 1) * d];
            let wf = w as f64;
            for j in 0..d {
                dst[j] += wf * src[j];
            }
        }
    }

    /// Densify; used by oracles and small tests.
    pub fn to_dense(&self) -> Tensor2D {
        let mut t = Tensor2D::zeros(self.rows, self.cols);
        for &(r, c, w) in &self.entries {
            t.set(r as usize, c as usize, w);
        }
        t
    }

    /// Write as `<stem>.coo` (little-endian u32 row, u32 col, f32 weight per
    /// entry) plus `<stem>.json` header.
    pub fn write_files(&self, stem: &Path) -> Result<()> {
        let header = SparseHeader {
            rows: self.rows,
            cols: self.cols,
            nnz: self.entries.len(),
        };
        let json_path = stem.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&header)?)?;
        let bin_path = stem.with_extension("coo");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
        for &(r, c, w) in &self.entries {
            f.write_all(&r.to_le_bytes())?;
            f.write_all(&c.to_le_bytes())?;
            f.write_all(&w.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_files(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let header: SparseHeader = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
        let bin_path = stem.with_extension("coo");
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != header.nnz * 12 {
            return Err(DreamError::Dimension {
                context: format!("{}", bin_path.display()),
                expected: header.nnz * 12,
                found: bytes.len(),
            });
        }
        let mut entries = Vec::with_capacity(header.nnz);
        for chunk in bytes.chunks_exact(12) {
            let r = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let c = u32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
            let w = f32::from_le_bytes([chunk[8], chunk[9], chunk[10], chunk[11]]);
            entries.push((r, c, w));
        }
        SparseMatrix::new(header.rows, header.cols, entries)
    }
}

#[derive(Serialize, Deserialize)]
struct SparseHeader {
    rows: usize,
    cols: usize,
    nnz: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spmm_identity_pattern() {
        let s = SparseMatrix::new(2, 2, vec![(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let d = Tensor2D::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(s.spmm(&d).unwrap(), d);
    }

    #[test]
    fn spmm_empty_annihilates() {
        let s = SparseMatrix::empty(3, 2);
        let d = Tensor2D::from_rows(&[vec![1.0], vec![2.0]]);
        let out = s.spmm(&d).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spmm_hand_case() {
        let s = SparseMatrix::new(2, 2, vec![(0, 1, 0.5), (1, 0, 0.5)]).unwrap();
        let d = Tensor2D::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let out = s.spmm(&d).unwrap();
        assert_eq!(out.data, vec![0.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn spmm_matches_dense_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rows = rng.random_range(1..20);
            let cols = rng.random_range(1..20);
            let d = rng.random_range(1..6);
            let mut entries = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if rng.random_range(0.0..1.0) < 0.3 {
                        entries.push((r as u32, c as u32, rng.random_range(-1.0..1.0)));
                    }
                }
            }
            let s = SparseMatrix::new(rows, cols, entries).unwrap();
            let dense = Tensor2D::from_data(
                cols,
                d,
                (0..cols * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let sparse_out = s.spmm(&dense).unwrap();
            let dense_out = matmul(&s.to_dense(), &dense).unwrap();
            for (a, b) in sparse_out.data.iter().zip(dense_out.data.iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn duplicate_entries_rejected() {
        let err = SparseMatrix::new(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]);
        assert!(err.is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g");
        let s = SparseMatrix::new(3, 4, vec![(0, 1, 0.25), (2, 3, -1.5)]).unwrap();
        s.write_files(&stem).unwrap();
        let back = SparseMatrix::read_files(&stem).unwrap();
        assert_eq!(s, back);
    }
}
