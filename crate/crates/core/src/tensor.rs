//! Dense row-major f32 matrices and the small kernels shared across modules.

use crate::error::{DreamError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Dense 2-D tensor, row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DreamError::Dimension {
                context: "Tensor2D::from_data".into(),
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor2D { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row-wise mean cosine similarity against `other`; rows with a zero norm
    /// on either side contribute 0 and are still counted.
    pub fn mean_row_cosine(&self, other: &Tensor2D) -> Result<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(DreamError::Dimension {
                context: "mean_row_cosine".into(),
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        if self.rows == 0 {
            return Ok(0.0);
        }
        let mut acc = 0.0f64;
        for r in 0..self.rows {
            acc += cosine(self.row(r), other.row(r)) as f64;
        }
        Ok((acc / self.rows as f64) as f32)
    }

    /// Write raw little-endian f32 bytes (row-major).
    pub fn write_f32_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Read raw little-endian f32 bytes written by [`Tensor2D::write_f32_file`].
    pub fn read_f32_file(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != rows * cols * 4 {
            return Err(DreamError::Dimension {
                context: format!("{}", path.display()),
                expected: rows * cols * 4,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor2D::from_data(rows, cols, data)
    }
}

/// Xavier (Glorot) uniform initialization: entries uniform in
/// `[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]`, deterministic per seed.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    assert!(rows >= 1 && cols >= 1);
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2D { rows, cols, data }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        acc += a[i] as f64 * b[i] as f64;
    }
    acc as f32
}

#[inline]
pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = norm(a);
    let nb = norm(b);
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Dense matmul, f64 accumulation: used by test oracles and evaluation paths.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(DreamError::Dimension {
            context: "matmul".into(),
            expected: a.cols,
            found: b.rows,
        });
    }
    let mut out = vec![0.0f64; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += av * brow[j] as f64;
            }
        }
    }
    Tensor2D::from_data(a.rows, b.cols, out.into_iter().map(|v| v as f32).collect())
}

/// Row-wise L2 normalization; rows with norm below 1e-12 become zero.
pub fn l2_normalize_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for r in 0..x.rows {
        let n = norm(x.row(r));
        let row = out.row_mut(r);
        if n > 1e-12 {
            for v in row.iter_mut() {
                *v /= n;
            }
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}
