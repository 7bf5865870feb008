//! Loss terms: pairwise ranking, intra/inter alignment, similarity
//! supervision, their weighted combination, and the standalone alignment
//! plug for host models.

use crate::autograd::{Tape, Var};
use crate::error::{DreamError, Result};
use crate::model::{ForwardVars, PreparedData};
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Loss-term weights. alpha scales intra-alignment, beta inter-alignment,
/// gamma the similarity-supervised term, lambda the L2 regularizer; tau is
/// the alignment softmax temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub lambda: f32,
    pub tau: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.1,
            lambda: 1e-4,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(DreamError::Config("loss weights must be >= 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(DreamError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// One training batch: row-aligned (user, positive item, negative item)
/// triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTriples {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    pub neg_items: Vec<u32>,
}

impl BatchTriples {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    fn user_rows(&self) -> Rc<Vec<usize>> {
        Rc::new(self.users.iter().map(|&u| u as usize).collect())
    }

    fn pos_rows(&self) -> Rc<Vec<usize>> {
        Rc::new(self.pos_items.iter().map(|&i| i as usize).collect())
    }

    fn neg_rows(&self) -> Rc<Vec<usize>> {
        Rc::new(self.neg_items.iter().map(|&i| i as usize).collect())
    }
}

/// Per-step loss values. Terms skipped because their weight is zero (or the
/// modal line is off) are recorded as 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub general: f64,
    pub intra_behavior: f64,
    pub intra_modal: f64,
    pub inter: f64,
    pub s3: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn intra(&self) -> f64 {
        self.intra_behavior + self.intra_modal
    }
}

/// Mean over triples of -log sigmoid(score(u, i) - score(u, i')).
pub fn bpr_loss(
    tape: &mut Tape,
    general_user: Var,
    general_item: Var,
    batch: &BatchTriples,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(DreamError::DegenerateBatch("empty BPR batch".into()));
    }
    let u = tape.gather_rows(general_user, batch.user_rows())?;
    let pos = tape.gather_rows(general_item, batch.pos_rows())?;
    let neg = tape.gather_rows(general_item, batch.neg_rows())?;
    let pos_scores = tape.row_dot(u, pos)?;
    let neg_scores = tape.row_dot(u, neg)?;
    tape.bpr_mean(pos_scores, neg_scores)
}

/// Contrastive alignment: row j of `positives` is the positive for row j of
/// `anchors`, every other row of `positives` is an in-batch negative. Rows
/// are L2-normalized first when `normalize` is set.
pub fn infonce(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    tau: f32,
    normalize: bool,
) -> Result<Var> {
    let (b, _) = tape.shape(anchors);
    if b < 2 {
        return Err(DreamError::DegenerateBatch(format!(
            "alignment needs a batch of >= 2, got {b}"
        )));
    }
    let zero_rows = |tape: &Tape, v: Var| {
        let (r, c) = tape.shape(v);
        let vals = tape.value(v);
        (0..r)
            .filter(|&i| vals[i * c..(i + 1) * c].iter().all(|&x| x == 0.0))
            .count()
    };
    let (a, p) = if normalize {
        let zn = zero_rows(tape, anchors) + zero_rows(tape, positives);
        if zn > 0 {
            eprintln!("warning: {zn} zero-norm rows in alignment batch normalize to zero");
        }
        (
            tape.l2_normalize_rows(anchors),
            tape.l2_normalize_rows(positives),
        )
    } else {
        (anchors, positives)
    };
    let logits = tape.matmul_nt(a, p)?;
    let logits = tape.scale(logits, 1.0 / tau as f64);
    tape.softmax_ce_diag(logits)
}

/// Behavior-domain intra alignment: batch users against positive items.
pub fn intra_behavior_term(
    tape: &mut Tape,
    fwd: &ForwardVars,
    batch: &BatchTriples,
    tau: f32,
    normalize: bool,
) -> Result<Var> {
    let bu = tape.gather_rows(fwd.behavior_user, batch.user_rows())?;
    let bi = tape.gather_rows(fwd.behavior_item, batch.pos_rows())?;
    infonce(tape, bu, bi, tau, normalize)
}

/// Modal-domain intra alignment: batch users against positive items.
pub fn intra_modal_term(
    tape: &mut Tape,
    fwd: &ForwardVars,
    batch: &BatchTriples,
    tau: f32,
    normalize: bool,
) -> Result<Var> {
    let (mu, mi) = match (fwd.modal_user, fwd.modal_item) {
        (Some(u), Some(i)) => (u, i),
        _ => {
            return Err(DreamError::Config(
                "modal intra-alignment requires the modal line".into(),
            ))
        }
    };
    let mu = tape.gather_rows(mu, batch.user_rows())?;
    let mi = tape.gather_rows(mi, batch.pos_rows())?;
    infonce(tape, mu, mi, tau, normalize)
}

/// Inter alignment: behavior vs modal representations, user side plus item
/// side.
pub fn inter_term(
    tape: &mut Tape,
    fwd: &ForwardVars,
    batch: &BatchTriples,
    tau: f32,
    normalize: bool,
) -> Result<Var> {
    let (mu, mi) = match (fwd.modal_user, fwd.modal_item) {
        (Some(u), Some(i)) => (u, i),
        _ => {
            return Err(DreamError::Config(
                "inter-alignment requires the modal line".into(),
            ))
        }
    };
    let user_rows = batch.user_rows();
    let pos_rows = batch.pos_rows();
    let bu = tape.gather_rows(fwd.behavior_user, Rc::clone(&user_rows))?;
    let muv = tape.gather_rows(mu, user_rows)?;
    let user_side = infonce(tape, bu, muv, tau, normalize)?;
    let bi = tape.gather_rows(fwd.behavior_item, Rc::clone(&pos_rows))?;
    let miv = tape.gather_rows(mi, pos_rows)?;
    let item_side = infonce(tape, bi, miv, tau, normalize)?;
    tape.add(user_side, item_side)
}

/// Similarity supervision over a recorded forward pass.
pub fn s3_term(
    tape: &mut Tape,
    fwd: &ForwardVars,
    prepared: &PreparedData,
    batch: &BatchTriples,
    normalize: bool,
) -> Result<Var> {
    let (mu, mi) = match (fwd.modal_user, fwd.modal_item) {
        (Some(u), Some(i)) => (u, i),
        _ => {
            return Err(DreamError::Config(
                "similarity supervision requires the modal line".into(),
            ))
        }
    };
    let raw_user = tape.constant(&prepared.raw_fused_user);
    let raw_item = tape.constant(&prepared.raw_fused_item);
    s3_loss(tape, mu, mi, raw_user, raw_item, batch, normalize)
}

/// Similarity-supervised loss: the batch similarity matrix of the learned
/// modal rows is pulled toward the (gradient-stopped) similarity matrix of
/// the fused raw features, item side plus user side.
pub fn s3_loss(
    tape: &mut Tape,
    modal_user: Var,
    modal_item: Var,
    raw_fused_user: Var,
    raw_fused_item: Var,
    batch: &BatchTriples,
    normalize: bool,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(DreamError::DegenerateBatch(
            "similarity supervision needs a batch of >= 2".into(),
        ));
    }
    let side = |tape: &mut Tape, learned: Var, raw: Var, rows: Rc<Vec<usize>>| -> Result<Var> {
        let l = tape.gather_rows(learned, Rc::clone(&rows))?;
        let r = tape.gather_rows(raw, rows)?;
        let (l, r) = if normalize {
            (tape.l2_normalize_rows(l), tape.l2_normalize_rows(r))
        } else {
            (l, r)
        };
        let learned_sims = tape.matmul_nt(l, l)?;
        let raw_sims = tape.matmul_nt(r, r)?;
        let target = tape.stop_grad(raw_sims);
        tape.mse_all(learned_sims, target)
    };
    let item_side = side(tape, modal_item, raw_fused_item, batch.pos_rows())?;
    let user_side = side(tape, modal_user, raw_fused_user, batch.user_rows())?;
    tape.add(item_side, user_side)
}

/// Weighted combination: general + alpha * intra + beta * inter + gamma * s3
/// + reg. Missing terms contribute zero.
fn combine_terms(
    tape: &mut Tape,
    general: Var,
    intra: Option<Var>,
    inter: Option<Var>,
    s3: Option<Var>,
    reg: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = general;
    if let Some(v) = intra {
        total = tape.add_scaled(total, v, weights.alpha as f64)?;
    }
    if let Some(v) = inter {
        total = tape.add_scaled(total, v, weights.beta as f64)?;
    }
    if let Some(v) = s3 {
        total = tape.add_scaled(total, v, weights.gamma as f64)?;
    }
    if let Some(v) = reg {
        total = tape.add_scaled(total, v, weights.lambda as f64)?;
    }
    Ok(total)
}

fn check_finite(tape: &Tape, v: Var, term: &str) -> Result<f64> {
    let value = tape.scalar(v);
    if !value.is_finite() {
        return Err(DreamError::NonFinite { term: term.into() });
    }
    Ok(value)
}

/// Assemble the full training loss for one batch on top of a recorded
/// forward pass. Alignment and similarity terms are only computed when their
/// weight is nonzero and the modal line produced representations.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    prepared: &PreparedData,
    batch: &BatchTriples,
    weights: &LossWeights,
    normalize: bool,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut breakdown = LossBreakdown::default();

    let general = bpr_loss(tape, fwd.general_user, fwd.general_item, batch)?;
    breakdown.general = check_finite(tape, general, "general")?;

    let has_modal = fwd.modal_user.is_some() && fwd.modal_item.is_some();

    let intra = if weights.alpha > 0.0 {
        let bia = intra_behavior_term(tape, fwd, batch, weights.tau, normalize)?;
        breakdown.intra_behavior = check_finite(tape, bia, "intra_behavior")?;
        let intra = if has_modal {
            let mia = intra_modal_term(tape, fwd, batch, weights.tau, normalize)?;
            breakdown.intra_modal = check_finite(tape, mia, "intra_modal")?;
            tape.add(bia, mia)?
        } else {
            bia
        };
        Some(intra)
    } else {
        None
    };

    let inter = if weights.beta > 0.0 && has_modal {
        let inter = inter_term(tape, fwd, batch, weights.tau, normalize)?;
        breakdown.inter = check_finite(tape, inter, "inter")?;
        Some(inter)
    } else {
        None
    };

    let s3 = if weights.gamma > 0.0 && has_modal {
        let s3 = s3_term(tape, fwd, prepared, batch, normalize)?;
        breakdown.s3 = check_finite(tape, s3, "s3")?;
        Some(s3)
    } else {
        None
    };

    let reg = if weights.lambda > 0.0 {
        // L2 over the ID-embedding rows this batch touches.
        let mut rows: Vec<usize> = Vec::with_capacity(batch.len() * 3);
        let m = prepared.num_users;
        rows.extend(batch.users.iter().map(|&u| u as usize));
        rows.extend(batch.pos_items.iter().map(|&i| m + i as usize));
        rows.extend(batch.neg_items.iter().map(|&i| m + i as usize));
        let picked = tape.gather_rows(fwd.embedding, Rc::new(rows))?;
        let reg = tape.mean_sq_norm(picked);
        breakdown.reg = weights.lambda as f64 * check_finite(tape, reg, "reg")?;
        Some(reg)
    } else {
        None
    };

    let total = combine_terms(tape, general, intra, inter, s3, reg, weights)?;
    breakdown.total = check_finite(tape, total, "total")?;
    Ok((total, breakdown))
}

/// Host-model representations accepted by the alignment plug.
pub struct HostReprs {
    pub behavior_user: Var,
    pub behavior_item: Var,
    pub modal_user: Var,
    pub modal_item: Var,
}

/// The pluggable behavior-modal alignment term for host models:
/// alpha * (intra user-item alignment in both domains) + beta * (inter
/// alignment of the two domains). The host's own loss is untouched.
pub fn bma_plug(
    tape: &mut Tape,
    host: &HostReprs,
    batch: &BatchTriples,
    weights: &LossWeights,
    normalize: bool,
) -> Result<(Var, f64, f64)> {
    weights.validate()?;
    let (_, bd) = tape.shape(host.behavior_user);
    let (_, md) = tape.shape(host.modal_user);
    if bd != md {
        return Err(DreamError::Config(format!(
            "alignment plug needs equal dims across domains, got {bd} vs {md}"
        )));
    }
    let zero = tape.constant(&Tensor2D::zeros(1, 1));
    if weights.alpha == 0.0 && weights.beta == 0.0 {
        return Ok((zero, 0.0, 0.0));
    }
    let user_rows = batch.user_rows();
    let pos_rows = batch.pos_rows();
    let bu = tape.gather_rows(host.behavior_user, Rc::clone(&user_rows))?;
    let bi = tape.gather_rows(host.behavior_item, Rc::clone(&pos_rows))?;
    let mu = tape.gather_rows(host.modal_user, Rc::clone(&user_rows))?;
    let mi = tape.gather_rows(host.modal_item, Rc::clone(&pos_rows))?;

    let mut intra_value = 0.0;
    let mut inter_value = 0.0;
    let mut total = zero;
    if weights.alpha > 0.0 {
        let bia = infonce(tape, bu, bi, weights.tau, normalize)?;
        let mia = infonce(tape, mu, mi, weights.tau, normalize)?;
        let intra = tape.add(bia, mia)?;
        intra_value = check_finite(tape, intra, "plug intra")?;
        total = tape.add_scaled(total, intra, weights.alpha as f64)?;
    }
    if weights.beta > 0.0 {
        let user_side = infonce(tape, bu, mu, weights.tau, normalize)?;
        let item_side = infonce(tape, bi, mi, weights.tau, normalize)?;
        let inter = tape.add(user_side, item_side)?;
        inter_value = check_finite(tape, inter, "plug inter")?;
        total = tape.add_scaled(total, inter, weights.beta as f64)?;
    }
    Ok((total, intra_value, inter_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::params::{ParamSet, ParamSlot};
    use crate::tensor::xavier_init;

    fn batch(users: &[u32], pos: &[u32], neg: &[u32]) -> BatchTriples {
        BatchTriples {
            users: users.to_vec(),
            pos_items: pos.to_vec(),
            neg_items: neg.to_vec(),
        }
    }

    #[test]
    fn bpr_zero_margin_is_ln2() {
        let mut tape = Tape::new();
        // One user, two items with identical embeddings: pos and neg scores
        // are equal.
        let users = tape.constant(&Tensor2D::from_rows(&[vec![1.0, 0.5]]));
        let items = tape.constant(&Tensor2D::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]));
        let b = batch(&[0], &[0], &[1]);
        let loss = bpr_loss(&mut tape, users, items, &b).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bpr_unit_margin_closed_form() {
        let mut tape = Tape::new();
        let users = tape.constant(&Tensor2D::from_rows(&[vec![1.0]]));
        let items = tape.constant(&Tensor2D::from_rows(&[vec![1.0], vec![0.0]]));
        let b = batch(&[0], &[0], &[1]);
        let loss = bpr_loss(&mut tape, users, items, &b).unwrap();
        // -log sigmoid(1) = softplus(-1)
        assert!((tape.scalar(loss) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn bpr_monotone_in_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let mut tape = Tape::new();
            let users = tape.constant(&Tensor2D::from_rows(&[vec![1.0]]));
            let items = tape.constant(&Tensor2D::from_rows(&[vec![margin], vec![0.0]]));
            let b = batch(&[0], &[0], &[1]);
            let loss = bpr_loss(&mut tape, users, items, &b).unwrap();
            let v = tape.scalar(loss);
            assert!(v < prev, "loss must strictly decrease with margin");
            prev = v;
        }
    }

    #[test]
    fn infonce_identical_rows_is_ln_b() {
        for b in [2usize, 4, 16] {
            let mut tape = Tape::new();
            let rows = Tensor2D::from_data(b, 3, vec![0.4; b * 3]).unwrap();
            let a = tape.constant(&rows);
            let p = tape.constant(&rows);
            let loss = infonce(&mut tape, a, p, 0.2, true).unwrap();
            assert!((tape.scalar(loss) - (b as f64).ln()).abs() < 1e-6, "B={b}");
        }
    }

    #[test]
    fn infonce_two_row_closed_form() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let p = tape.constant(&Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let loss = infonce(&mut tape, a, p, 0.2, true).unwrap();
        // Per anchor: -log(e^5 / (e^5 + e^0)) ~= 0.0067153.
        assert!((tape.scalar(loss) - 0.0067153).abs() < 1e-5);
    }

    #[test]
    fn infonce_scale_invariant_under_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let b = 6;
        let anchors = xavier_init(b, 4, 3);
        let positives = xavier_init(b, 4, 4);
        let rescale = |t: &Tensor2D, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = t.clone();
            for r in 0..out.rows {
                let s: f32 = rng.random_range(0.1..7.0);
                for v in out.row_mut(r) {
                    *v *= s;
                }
            }
            out
        };
        let anchors_scaled = rescale(&anchors, &mut rng);
        let positives_scaled = rescale(&positives, &mut rng);
        let mut t1 = Tape::new();
        let a1 = t1.constant(&anchors);
        let p1 = t1.constant(&positives);
        let l1 = infonce(&mut t1, a1, p1, 0.2, true).unwrap();
        let mut t2 = Tape::new();
        let a2 = t2.constant(&anchors_scaled);
        let p2 = t2.constant(&positives_scaled);
        let l2 = infonce(&mut t2, a2, p2, 0.2, true).unwrap();
        assert!((t1.scalar(l1) - t2.scalar(l2)).abs() < 1e-6);
    }

    #[test]
    fn infonce_rejects_tiny_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor2D::from_rows(&[vec![1.0, 0.0]]));
        let p = tape.constant(&Tensor2D::from_rows(&[vec![1.0, 0.0]]));
        assert!(matches!(
            infonce(&mut tape, a, p, 0.2, true),
            Err(DreamError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn infonce_nonnegative_on_random_rows() {
        for seed in 0..10 {
            let mut tape = Tape::new();
            let a = tape.constant(&xavier_init(8, 5, seed));
            let p = tape.constant(&xavier_init(8, 5, seed + 100));
            let loss = infonce(&mut tape, a, p, 0.2, true).unwrap();
            assert!(tape.scalar(loss) >= 0.0);
        }
    }

    #[test]
    fn s3_zero_when_learned_proportional_to_raw() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let raw_items = xavier_init(6, 4, 10);
        let raw_users = xavier_init(5, 4, 11);
        let mut learned_items = raw_items.clone();
        let mut learned_users = raw_users.clone();
        for r in 0..6 {
            let s: f32 = rng.random_range(0.2..5.0);
            for v in learned_items.row_mut(r) {
                *v *= s;
            }
        }
        for r in 0..5 {
            let s: f32 = rng.random_range(0.2..5.0);
            for v in learned_users.row_mut(r) {
                *v *= s;
            }
        }
        let mut tape = Tape::new();
        let mu = tape.constant(&learned_users);
        let mi = tape.constant(&learned_items);
        let ru = tape.constant(&raw_users);
        let ri = tape.constant(&raw_items);
        let b = batch(&[0, 1, 2], &[0, 3, 5], &[1, 2, 4]);
        let loss = s3_loss(&mut tape, mu, mi, ru, ri, &b, true).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-9);
    }

    #[test]
    fn s3_hand_mse_case() {
        // Learned rows orthonormal -> identity similarity; raw rows identical
        // -> all-ones similarity; MSE per side = 0.5, two sides sum to 1.
        let learned = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let raw = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let mut tape = Tape::new();
        let mu = tape.constant(&learned);
        let mi = tape.constant(&learned);
        let ru = tape.constant(&raw);
        let ri = tape.constant(&raw);
        let b = batch(&[0, 1], &[0, 1], &[1, 0]);
        let loss = s3_loss(&mut tape, mu, mi, ru, ri, &b, true).unwrap();
        assert!((tape.scalar(loss) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn s3_raw_branch_gets_no_gradient() {
        // Route a parameter through the raw side only; its gradient must be 0.
        let mut params = ParamSet::default();
        params.add(ParamSlot::new("raw", xavier_init(4, 3, 5), true));
        params.add(ParamSlot::new("learned", xavier_init(4, 3, 6), true));
        let mut tape = Tape::new();
        let raw = tape.param(&params, 0);
        let learned = tape.param(&params, 1);
        let b = batch(&[0, 1], &[2, 3], &[0, 1]);
        let loss = s3_loss(&mut tape, learned, learned, raw, raw, &b, true).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!(params.slots[0].grad.data.iter().all(|&g| g == 0.0));
        assert!(params.slots[1].grad.data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn combine_terms_weighted_sum_arithmetic() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: f32| {
            let t = Tensor2D::from_data(1, 1, vec![v]).unwrap();
            tape.constant(&t)
        };
        let general = mk(&mut tape, 1.0);
        let intra = mk(&mut tape, 2.0);
        let inter = mk(&mut tape, 3.0);
        let s3 = mk(&mut tape, 4.0);
        let weights = LossWeights {
            alpha: 0.01,
            beta: 0.03,
            gamma: 0.1,
            lambda: 0.0,
            tau: 0.2,
        };
        let total = combine_terms(
            &mut tape,
            general,
            Some(intra),
            Some(inter),
            Some(s3),
            None,
            &weights,
        )
        .unwrap();
        assert!((tape.scalar(total) - 1.51).abs() < 1e-7);
    }

    #[test]
    fn breakdown_total_matches_recombination() {
        use crate::model::{
            BehaviorLineConfig, DreamModel, ModalLineConfig, ModelConfig, PreparedData,
        };
        use crate::synthetic::{generate_dataset, SyntheticConfig};
        let ds = generate_dataset(
            &SyntheticConfig {
                users: 10,
                items: 12,
                blocks: 2,
                feature_dim: 6,
                interactions_per_user: 5,
                ..Default::default()
            },
            (1.0, 0.0, 0.0),
            3,
        )
        .unwrap();
        let config = ModelConfig {
            behavior: BehaviorLineConfig { layers: 2, dim: 6 },
            modal: ModalLineConfig {
                k: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let prepared = PreparedData::build(&ds, &config).unwrap();
        let model = DreamModel::new(&prepared, config, 13).unwrap();
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &prepared).unwrap();
        let b = batch(&[0, 1, 2, 3], &[0, 2, 4, 6], &[1, 3, 5, 7]);
        let (total, breakdown) = total_loss(&mut tape, &fwd, &prepared, &b, &weights, true).unwrap();
        let recombined = breakdown.general
            + weights.alpha as f64 * breakdown.intra()
            + weights.beta as f64 * breakdown.inter
            + weights.gamma as f64 * breakdown.s3
            + breakdown.reg;
        assert!((breakdown.total - recombined).abs() < 1e-7);
        assert!((tape.scalar(total) - breakdown.total).abs() < 1e-12);
    }

    #[test]
    fn bma_plug_zero_weights_contribute_nothing() {
        let mut params = ParamSet::default();
        params.add(ParamSlot::new("b", xavier_init(6, 4, 1), true));
        params.add(ParamSlot::new("m", xavier_init(6, 4, 2), true));
        let mut tape = Tape::new();
        let bvar = tape.param(&params, 0);
        let mvar = tape.param(&params, 1);
        let host = HostReprs {
            behavior_user: bvar,
            behavior_item: bvar,
            modal_user: mvar,
            modal_item: mvar,
        };
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let b = batch(&[0, 1], &[2, 3], &[4, 5]);
        let (loss, intra, inter) = bma_plug(&mut tape, &host, &b, &weights, true).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        assert_eq!((intra, inter), (0.0, 0.0));
        tape.backward(loss, &mut params).unwrap();
        assert!(params.slots[0].grad.data.iter().all(|&g| g == 0.0));
        assert!(params.slots[1].grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bma_plug_identical_domains_inter_is_ln_b() {
        let mut tape = Tape::new();
        let rows = Tensor2D::from_data(3, 2, vec![0.5; 6]).unwrap();
        let v = tape.constant(&rows);
        let host = HostReprs {
            behavior_user: v,
            behavior_item: v,
            modal_user: v,
            modal_item: v,
        };
        let weights = LossWeights {
            alpha: 0.0,
            beta: 1.0,
            ..Default::default()
        };
        let b = batch(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]);
        let (_, _, inter) = bma_plug(&mut tape, &host, &b, &weights, true).unwrap();
        // Two sides, each ln 3 with all rows identical.
        assert!((inter - 2.0 * 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn bma_plug_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let bvar = tape.constant(&Tensor2D::zeros(4, 3));
        let mvar = tape.constant(&Tensor2D::zeros(4, 5));
        let host = HostReprs {
            behavior_user: bvar,
            behavior_item: bvar,
            modal_user: mvar,
            modal_item: mvar,
        };
        let b = batch(&[0], &[1], &[2]);
        assert!(matches!(
            bma_plug(&mut tape, &host, &b, &LossWeights::default(), true),
            Err(DreamError::Config(_))
        ));
    }

    #[test]
    fn bma_plug_gradients_match_finite_differences() {
        let mut params = ParamSet::default();
        params.add(ParamSlot::new("host_behavior", xavier_init(6, 4, 31), true));
        // The modal side is a frozen projection of features: keep it constant.
        let modal = xavier_init(6, 4, 32);
        let weights = LossWeights {
            alpha: 0.03,
            beta: 0.03,
            ..Default::default()
        };
        let b = batch(&[0, 1, 2], &[3, 4, 5], &[0, 2, 4]);
        let build = |q: &ParamSet| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let bvar = tape.param(q, 0);
            let mvar = tape.constant(&modal);
            let host = HostReprs {
                behavior_user: bvar,
                behavior_item: bvar,
                modal_user: mvar,
                modal_item: mvar,
            };
            let (loss, _, _) = bma_plug(&mut tape, &host, &b, &weights, true)?;
            Ok((tape, loss))
        };
        let (tape, loss) = build(&params).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let report = grad_check(
            &mut params,
            |q| {
                let (t, l) = build(q)?;
                Ok(t.scalar(l))
            },
            1e-3,
            1e-3,
            300,
            9,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err());
    }
}
