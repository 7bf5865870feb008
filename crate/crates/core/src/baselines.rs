//! Host models for the pluggable behavior-modal alignment experiment: a
//! graph-convolution collaborative-filtering baseline and a VBPR-style
//! feature-projection baseline. Both train with plain ranking loss; the
//! alignment plug can be attached without touching their structure.

use crate::autograd::{Tape, Var};
use crate::error::{DreamError, Result};
use crate::model::{behavior_forward, DualRepresentations, PreparedData};
use crate::objectives::{bma_plug, bpr_loss, BatchTriples, HostReprs, LossBreakdown, LossWeights};
use crate::params::{ParamSet, ParamSlot};
use crate::tensor::{matmul, xavier_init, Tensor2D};
use crate::train::TrainableModel;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// ID embeddings propagated over the interaction graph; scores use the
    /// behavior line only. The modal domain is a frozen random projection of
    /// the fused raw features, present only for the alignment plug.
    LightGcnOnly,
    /// Matrix factorization plus a learned projection of the fused raw
    /// features; scores use behavior + modal.
    VbprStyle,
}

pub struct BaselineModel {
    pub kind: BaselineKind,
    pub params: ParamSet,
    pub dim: usize,
    pub behavior_layers: usize,
    pub plug_enabled: bool,
    pub normalize_alignment: bool,
    num_users: usize,
    num_items: usize,
    /// Frozen modal representations (LightGcnOnly).
    frozen_modal_user: Option<Tensor2D>,
    frozen_modal_item: Option<Tensor2D>,
}

impl BaselineModel {
    pub fn new(
        kind: BaselineKind,
        prepared: &PreparedData,
        dim: usize,
        behavior_layers: usize,
        plug_enabled: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamSet::default();
        let rows = prepared.num_users + prepared.num_items;
        params.add(ParamSlot::new(
            "embedding",
            xavier_init(rows, dim, seed ^ crate::ingest::fnv1a64(b"baseline_embedding")),
            true,
        ));
        let (frozen_modal_user, frozen_modal_item) = match kind {
            BaselineKind::LightGcnOnly => {
                let d_m = prepared.raw_fused_item.cols;
                if prepared.raw_fused_user.cols != d_m {
                    return Err(DreamError::Dimension {
                        context: "fused feature dims".into(),
                        expected: d_m,
                        found: prepared.raw_fused_user.cols,
                    });
                }
                let proj = xavier_init(d_m, dim, seed ^ crate::ingest::fnv1a64(b"frozen_proj"));
                (
                    Some(matmul(&prepared.raw_fused_user, &proj)?),
                    Some(matmul(&prepared.raw_fused_item, &proj)?),
                )
            }
            BaselineKind::VbprStyle => {
                let d_m = prepared.raw_fused_item.cols;
                if prepared.raw_fused_user.cols != d_m {
                    return Err(DreamError::Dimension {
                        context: "fused feature dims".into(),
                        expected: d_m,
                        found: prepared.raw_fused_user.cols,
                    });
                }
                params.add(ParamSlot::new(
                    "feature_proj",
                    xavier_init(d_m, dim, seed ^ crate::ingest::fnv1a64(b"feature_proj")),
                    true,
                ));
                (None, None)
            }
        };
        Ok(BaselineModel {
            kind,
            params,
            dim,
            behavior_layers,
            plug_enabled,
            normalize_alignment: true,
            num_users: prepared.num_users,
            num_items: prepared.num_items,
            frozen_modal_user,
            frozen_modal_item,
        })
    }

    fn forward_lines(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prepared: &PreparedData,
    ) -> Result<(Var, Var, Var, Var, Var)> {
        let emb_slot = params
            .index_of("embedding")
            .ok_or_else(|| DreamError::Internal("embedding slot missing".into()))?;
        let embedding = tape.param(params, emb_slot);
        match self.kind {
            BaselineKind::LightGcnOnly => {
                let (bu, bi) = behavior_forward(
                    tape,
                    Rc::clone(&prepared.adjacency),
                    embedding,
                    self.behavior_layers,
                    self.num_users,
                    self.num_items,
                )?;
                let mu = tape.constant(self.frozen_modal_user.as_ref().expect("built"));
                let mi = tape.constant(self.frozen_modal_item.as_ref().expect("built"));
                Ok((embedding, bu, bi, mu, mi))
            }
            BaselineKind::VbprStyle => {
                let bu = tape.slice_rows(embedding, 0, self.num_users)?;
                let bi = tape.slice_rows(embedding, self.num_users, self.num_items)?;
                let proj_slot = params
                    .index_of("feature_proj")
                    .ok_or_else(|| DreamError::Internal("feature_proj slot missing".into()))?;
                let proj = tape.param(params, proj_slot);
                let fu = tape.constant(&prepared.raw_fused_user);
                let fi = tape.constant(&prepared.raw_fused_item);
                let mu = tape.matmul(fu, proj)?;
                let mi = tape.matmul(fi, proj)?;
                Ok((embedding, bu, bi, mu, mi))
            }
        }
    }
}

impl TrainableModel for BaselineModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_on_batch(
        &self,
        tape: &mut Tape,
        prepared: &PreparedData,
        batch: &BatchTriples,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let (embedding, bu, bi, mu, mi) = self.forward_lines(tape, &self.params, prepared)?;
        let mut breakdown = LossBreakdown::default();
        // Scoring representations per host: behavior only for the graph
        // model, behavior + modal for the projection model.
        let (su, si) = match self.kind {
            BaselineKind::LightGcnOnly => (bu, bi),
            BaselineKind::VbprStyle => (tape.add(bu, mu)?, tape.add(bi, mi)?),
        };
        let general = bpr_loss(tape, su, si, batch)?;
        breakdown.general = tape.scalar(general);
        let mut total = general;

        if weights.lambda > 0.0 {
            let m = self.num_users;
            let mut rows: Vec<usize> = Vec::with_capacity(batch.len() * 3);
            rows.extend(batch.users.iter().map(|&u| u as usize));
            rows.extend(batch.pos_items.iter().map(|&i| m + i as usize));
            rows.extend(batch.neg_items.iter().map(|&i| m + i as usize));
            let picked = tape.gather_rows(embedding, Rc::new(rows))?;
            let reg = tape.mean_sq_norm(picked);
            breakdown.reg = weights.lambda as f64 * tape.scalar(reg);
            total = tape.add_scaled(total, reg, weights.lambda as f64)?;
        }

        if self.plug_enabled {
            let host = HostReprs {
                behavior_user: bu,
                behavior_item: bi,
                modal_user: mu,
                modal_item: mi,
            };
            let (plug, intra, inter) =
                bma_plug(tape, &host, batch, weights, self.normalize_alignment)?;
            breakdown.intra_behavior = intra;
            breakdown.inter = inter;
            total = tape.add(total, plug)?;
        }
        breakdown.total = tape.scalar(total);
        if !breakdown.total.is_finite() {
            return Err(DreamError::NonFinite {
                term: "baseline total".into(),
            });
        }
        Ok((total, breakdown))
    }

    fn representations(&self, prepared: &PreparedData) -> Result<DualRepresentations> {
        let mut tape = Tape::new();
        let (_, bu, bi, mu, mi) = self.forward_lines(&mut tape, &self.params, prepared)?;
        let behavior_user = tape.to_tensor(bu);
        let behavior_item = tape.to_tensor(bi);
        // Scoring must match training: the graph host ranks with behavior
        // only, so its modal snapshot is zero.
        let (modal_user, modal_item) = match self.kind {
            BaselineKind::LightGcnOnly => (
                Tensor2D::zeros(self.num_users, self.dim),
                Tensor2D::zeros(self.num_items, self.dim),
            ),
            BaselineKind::VbprStyle => (tape.to_tensor(mu), tape.to_tensor(mi)),
        };
        Ok(DualRepresentations::new(
            behavior_user,
            behavior_item,
            modal_user,
            modal_item,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::model::{ModalLineConfig, ModelConfig, PreparedData};
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    fn prepared() -> PreparedData {
        let ds = generate_dataset(
            &SyntheticConfig {
                users: 16,
                items: 12,
                blocks: 2,
                feature_dim: 6,
                interactions_per_user: 5,
                ..Default::default()
            },
            (0.8, 0.1, 0.1),
            9,
        )
        .unwrap();
        let config = ModelConfig {
            modal: ModalLineConfig {
                k: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        PreparedData::build(&ds, &config).unwrap()
    }

    fn batch() -> BatchTriples {
        BatchTriples {
            users: vec![0, 1, 2, 3],
            pos_items: vec![0, 1, 2, 3],
            neg_items: vec![4, 5, 6, 7],
        }
    }

    #[test]
    fn lightgcn_host_scores_with_behavior_only() {
        let p = prepared();
        let model = BaselineModel::new(BaselineKind::LightGcnOnly, &p, 8, 2, false, 3).unwrap();
        let reprs = model.representations(&p).unwrap();
        assert!(reprs.modal_user.data.iter().all(|&v| v == 0.0));
        for (g, b) in reprs
            .general_user
            .data
            .iter()
            .zip(&reprs.behavior_user.data)
        {
            assert_eq!(g, b);
        }
    }

    #[test]
    fn vbpr_host_scores_with_both_lines() {
        let p = prepared();
        let model = BaselineModel::new(BaselineKind::VbprStyle, &p, 8, 0, false, 3).unwrap();
        let reprs = model.representations(&p).unwrap();
        assert!(reprs.modal_item.data.iter().any(|&v| v != 0.0));
        for idx in 0..reprs.general_item.data.len() {
            assert_eq!(
                reprs.general_item.data[idx],
                reprs.behavior_item.data[idx] + reprs.modal_item.data[idx]
            );
        }
    }

    #[test]
    fn plug_gradients_are_finite_and_match_fd() {
        let p = prepared();
        let weights = LossWeights {
            alpha: 0.03,
            beta: 0.03,
            gamma: 0.0,
            lambda: 1e-4,
            tau: 0.2,
        };
        for kind in [BaselineKind::LightGcnOnly, BaselineKind::VbprStyle] {
            let mut model = BaselineModel::new(kind, &p, 6, 2, true, 5).unwrap();
            let b = batch();
            let mut tape = Tape::new();
            let (loss, breakdown) = model.loss_on_batch(&mut tape, &p, &b, &weights).unwrap();
            assert!(breakdown.total.is_finite());
            assert!(breakdown.inter > 0.0, "plug inter term should be active");
            tape.backward(loss, &mut model.params).unwrap();

            // Finite differences over a snapshot of the params.
            let mut params = model.params.clone();
            let report = grad_check(
                &mut params,
                |q| {
                    let mut t = Tape::new();
                    let saved = std::mem::replace(&mut model.params, q.clone());
                    let out = model.loss_on_batch(&mut t, &p, &b, &weights);
                    model.params = saved;
                    out.map(|(l, _)| t.scalar(l))
                },
                1e-3,
                1e-3,
                250,
                17,
            )
            .unwrap();
            assert!(
                report.pass,
                "{kind:?} max rel err {}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn plug_disabled_leaves_loss_at_bpr_plus_reg() {
        let p = prepared();
        let weights = LossWeights::default();
        let model = BaselineModel::new(BaselineKind::LightGcnOnly, &p, 6, 2, false, 5).unwrap();
        let mut tape = Tape::new();
        let (_, breakdown) = model.loss_on_batch(&mut tape, &p, &batch(), &weights).unwrap();
        assert_eq!(breakdown.intra_behavior, 0.0);
        assert_eq!(breakdown.inter, 0.0);
        assert!((breakdown.total - breakdown.general - breakdown.reg).abs() < 1e-9);
    }
}
