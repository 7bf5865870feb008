//! Analysis signals tracked during and after training: drift of learned
//! modal representations away from the original features, cosine alignment
//! between the two lines, and per-line evaluation.

use crate::error::{DreamError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::DualRepresentations;
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Mean absolute difference between the off-diagonal entries of the cosine
/// similarity matrices of the learned rows and of the raw fused features,
/// over a fixed sample of row indices. The two inputs may have different
/// dimensionalities; the comparison happens at the similarity-matrix level.
pub fn modal_drift(
    modal_reprs: &Tensor2D,
    raw_fused: &Tensor2D,
    sample: &[usize],
) -> Result<f32> {
    let s = sample.len();
    if s < 2 {
        return Err(DreamError::DegenerateBatch(
            "drift needs a sample of >= 2 rows".into(),
        ));
    }
    if modal_reprs.rows != raw_fused.rows {
        return Err(DreamError::Dimension {
            context: "modal_drift rows".into(),
            expected: modal_reprs.rows,
            found: raw_fused.rows,
        });
    }
    if let Some(&bad) = sample.iter().find(|&&i| i >= modal_reprs.rows) {
        return Err(DreamError::Dimension {
            context: "modal_drift sample index".into(),
            expected: modal_reprs.rows,
            found: bad,
        });
    }
    let mut acc = 0.0f64;
    for (a_pos, &a) in sample.iter().enumerate() {
        for &b in &sample[a_pos + 1..] {
            let learned = crate::tensor::cosine(modal_reprs.row(a), modal_reprs.row(b));
            let raw = crate::tensor::cosine(raw_fused.row(a), raw_fused.row(b));
            acc += (learned as f64 - raw as f64).abs();
        }
    }
    let pairs = (s * (s - 1) / 2) as f64;
    Ok((acc / pairs) as f32)
}

/// Mean row-wise cosine between the two lines; zero rows contribute 0 and
/// are counted.
pub fn dual_cosine(behavior: &Tensor2D, modal: &Tensor2D) -> Result<f32> {
    behavior.mean_row_cosine(modal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Behavior,
    Modal,
    General,
}

impl Line {
    pub fn name(&self) -> &'static str {
        match self {
            Line::Behavior => "behavior",
            Line::Modal => "modal",
            Line::General => "general",
        }
    }

    pub fn all() -> [Line; 3] {
        [Line::Behavior, Line::Modal, Line::General]
    }
}

/// Evaluate one line of the dual representations with the standard protocol.
pub fn evaluate_line(
    reprs: &DualRepresentations,
    line: Line,
    relevant: &[Vec<u32>],
    train_items: &[Vec<u32>],
    k_list: &[usize],
    split_name: &str,
) -> Result<EvalReport> {
    let (users, items) = match line {
        Line::Behavior => (&reprs.behavior_user, &reprs.behavior_item),
        Line::Modal => (&reprs.modal_user, &reprs.modal_item),
        Line::General => (&reprs.general_user, &reprs.general_item),
    };
    evaluate(users, items, relevant, train_items, k_list, true, split_name)
}

/// Per-epoch drift values, plot-ready.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DriftSeries {
    pub points: Vec<(usize, f32)>,
}

impl DriftSeries {
    pub fn push(&mut self, epoch: usize, value: f32) {
        self.points.push((epoch, value));
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,value")?;
        for (epoch, value) in &self.points {
            writeln!(f, "{epoch},{value}")?;
        }
        Ok(())
    }
}

/// Per-epoch behavior/modal cosine alignment (users, items, pooled).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub points: Vec<(usize, f32, f32, f32)>,
}

impl AlignmentSeries {
    pub fn push(&mut self, epoch: usize, users: f32, items: f32, pooled: f32) {
        self.points.push((epoch, users, items, pooled));
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,users,items,pooled")?;
        for (epoch, users, items, pooled) in &self.points {
            writeln!(f, "{epoch},{users},{items},{pooled}")?;
        }
        Ok(())
    }
}

/// Per-line evaluation rows for `line_eval.csv`.
#[derive(Debug, Clone, Default)]
pub struct LineEvalTable {
    pub rows: Vec<(usize, Line, usize, &'static str, f64)>,
}

impl LineEvalTable {
    pub fn push_report(&mut self, epoch: usize, line: Line, report: &EvalReport) {
        for m in &report.metrics {
            self.rows.push((epoch, line, m.k, "recall", m.recall));
            self.rows.push((epoch, line, m.k, "ndcg", m.ndcg));
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,line,k,metric,value")?;
        for (epoch, line, k, metric, value) in &self.rows {
            writeln!(f, "{epoch},{},{k},{metric},{value}", line.name())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::xavier_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drift_zero_for_proportional_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = xavier_init(8, 5, 2);
        let mut learned = raw.clone();
        for r in 0..8 {
            let s: f32 = rng.random_range(0.3..4.0);
            for v in learned.row_mut(r) {
                *v *= s;
            }
        }
        let sample: Vec<usize> = (0..8).collect();
        let d = modal_drift(&learned, &raw, &sample).unwrap();
        assert!(d.abs() < 1e-6);
    }

    #[test]
    fn drift_single_pair_hand_value() {
        // Learned rows orthogonal (cos 0), raw rows identical (cos 1).
        let learned = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let raw = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let d = modal_drift(&learned, &raw, &[0, 1]).unwrap();
        assert!((d - 1.0).abs() < 1e-7);
    }

    #[test]
    fn drift_matches_dense_oracle_on_mismatched_dims() {
        let learned = xavier_init(16, 8, 3);
        let raw = xavier_init(16, 31, 4);
        let sample: Vec<usize> = (0..16).collect();
        let got = modal_drift(&learned, &raw, &sample).unwrap();
        // Dense oracle over full similarity matrices.
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for a in 0..16 {
            for b in 0..16 {
                if a == b {
                    continue;
                }
                let l = crate::tensor::cosine(learned.row(a), learned.row(b)) as f64;
                let r = crate::tensor::cosine(raw.row(a), raw.row(b)) as f64;
                acc += (l - r).abs();
                count += 1;
            }
        }
        let want = (acc / count as f64) as f32;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn drift_invariant_to_consistent_permutation() {
        let learned = xavier_init(10, 4, 7);
        let raw = xavier_init(10, 6, 8);
        let sample = vec![0usize, 2, 5, 7, 9];
        let permuted = vec![9usize, 7, 5, 2, 0];
        let a = modal_drift(&learned, &raw, &sample).unwrap();
        let b = modal_drift(&learned, &raw, &permuted).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn drift_rejects_tiny_sample() {
        let t = xavier_init(4, 3, 1);
        assert!(modal_drift(&t, &t, &[0]).is_err());
    }

    #[test]
    fn dual_cosine_hand_cases() {
        let x = xavier_init(5, 4, 11);
        assert!((dual_cosine(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let neg = Tensor2D {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| -v).collect(),
        };
        assert!((dual_cosine(&x, &neg).unwrap() + 1.0).abs() < 1e-6);
        // One aligned row, one orthogonal row: mean is 0.5.
        let a = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((dual_cosine(&a, &b).unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn csv_writers_produce_plot_ready_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut drift = DriftSeries::default();
        drift.push(1, 0.5);
        drift.push(2, 0.25);
        let p = dir.path().join("drift.csv");
        drift.write_csv(&p).unwrap();
        let content = std::fs::read_to_string(&p).unwrap();
        assert!(content.starts_with("epoch,value\n1,0.5\n2,0.25"));

        let mut align = AlignmentSeries::default();
        align.push(1, 0.1, 0.2, 0.15);
        let p = dir.path().join("alignment.csv");
        align.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("epoch,users,items,pooled\n1,0.1,0.2,0.15"));
    }
}
