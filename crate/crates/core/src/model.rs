//! The dual-line forward pass: behavior line (graph convolution over the
//! interaction graph plus layer mean), modal line (filter gates, relation
//! graph convolution, modality fusion), and the general representation.

use crate::autograd::{Tape, Var};
use crate::error::{DreamError, Result};
use crate::graph::{build_normalized_adjacency, build_relation_graph, GraphScope};
use crate::ingest::{Dataset, Modality};
use crate::params::{ParamSet, ParamSlot};
use crate::sparse::SparseMatrix;
use crate::tensor::{xavier_init, Tensor2D};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Which behavior embedding feeds the filter gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateInput {
    /// The layer-0 ID embedding table.
    Base,
    /// The aggregated behavior-line output.
    Aggregated,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BehaviorLineConfig {
    pub layers: usize,
    pub dim: usize,
}

impl Default for BehaviorLineConfig {
    fn default() -> Self {
        BehaviorLineConfig { layers: 2, dim: 64 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModalLineConfig {
    /// Master switch; off reduces the model to the behavior line + BPR.
    pub enabled: bool,
    pub modal_layers: usize,
    /// Fusion weight for the vision branch; text gets 1 - vision_weight.
    pub vision_weight: f32,
    /// Relation-graph neighbor count (used at graph build time).
    pub k: usize,
    pub use_vision: bool,
    pub use_text: bool,
    /// Off replaces the gate with a plain linear projection of the features.
    pub use_filter_gate: bool,
    pub use_item_graph: bool,
    pub use_user_graph: bool,
    pub gate_input: GateInput,
    /// Detach the gate's behavior-embedding operand.
    pub detach_gate_behavior: bool,
    /// Keep self-loops in the relation graphs (build time).
    pub self_loop: bool,
}

impl Default for ModalLineConfig {
    fn default() -> Self {
        ModalLineConfig {
            enabled: true,
            modal_layers: 1,
            vision_weight: 0.3,
            k: 10,
            use_vision: true,
            use_text: true,
            use_filter_gate: true,
            use_item_graph: true,
            use_user_graph: true,
            gate_input: GateInput::Base,
            detach_gate_behavior: false,
            self_loop: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub behavior: BehaviorLineConfig,
    pub modal: ModalLineConfig,
    /// L2-normalize rows inside alignment and similarity-supervision terms.
    pub normalize_alignment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            behavior: BehaviorLineConfig::default(),
            modal: ModalLineConfig::default(),
            normalize_alignment: true,
        }
    }
}

impl ModelConfig {
    /// Modalities active under this config, fusion order fixed.
    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut v = Vec::new();
        if self.modal.use_vision {
            v.push(Modality::Vision);
        }
        if self.modal.use_text {
            v.push(Modality::Text);
        }
        v
    }

    /// Fusion weight per modality; a single active modality takes weight 1.
    pub fn fusion_weight(&self, m: Modality) -> f32 {
        match (self.modal.use_vision, self.modal.use_text) {
            (true, true) => match m {
                Modality::Vision => self.modal.vision_weight,
                Modality::Text => 1.0 - self.modal.vision_weight,
            },
            _ => 1.0,
        }
    }
}

/// Frozen inputs shared by every forward pass: the normalized interaction
/// adjacency, per-modality relation graphs, raw features, and the fused raw
/// features used by the similarity-supervision and drift computations.
pub struct PreparedData {
    pub num_users: usize,
    pub num_items: usize,
    pub adjacency: Rc<SparseMatrix>,
    pub item_graphs: Vec<(Modality, Rc<SparseMatrix>)>,
    pub user_graphs: Vec<(Modality, Rc<SparseMatrix>)>,
    pub item_features: Vec<(Modality, Tensor2D)>,
    pub user_features: Vec<(Modality, Tensor2D)>,
    pub raw_fused_item: Tensor2D,
    pub raw_fused_user: Tensor2D,
}

fn lookup<T>(list: &[(Modality, T)], m: Modality) -> Option<&T> {
    list.iter().find(|(mm, _)| *mm == m).map(|(_, t)| t)
}

/// Fuse per-modality raw features with the modal-line weights. Equal
/// dimensionalities fuse by weighted sum; unequal ones by weighted
/// concatenation, which preserves the same weighted dot-product structure.
pub fn fuse_raw_features(
    vision: Option<&Tensor2D>,
    text: Option<&Tensor2D>,
    vision_weight: f32,
) -> Result<Tensor2D> {
    match (vision, text) {
        (Some(v), Some(t)) => {
            if v.rows != t.rows {
                return Err(DreamError::Dimension {
                    context: "fuse_raw_features rows".into(),
                    expected: v.rows,
                    found: t.rows,
                });
            }
            let (av, at) = (vision_weight, 1.0 - vision_weight);
            if v.cols == t.cols {
                let data = v
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(x, y)| av * x + at * y)
                    .collect();
                Tensor2D::from_data(v.rows, v.cols, data)
            } else {
                let mut out = Tensor2D::zeros(v.rows, v.cols + t.cols);
                for r in 0..v.rows {
                    let dst = out.row_mut(r);
                    for (i, x) in v.row(r).iter().enumerate() {
                        dst[i] = av * x;
                    }
                    for (i, y) in t.row(r).iter().enumerate() {
                        dst[v.cols + i] = at * y;
                    }
                }
                Ok(out)
            }
        }
        (Some(v), None) => Ok(v.clone()),
        (None, Some(t)) => Ok(t.clone()),
        (None, None) => Err(DreamError::Config(
            "at least one modality must be enabled".into(),
        )),
    }
}

impl PreparedData {
    /// Build all frozen graphs from the dataset's training split and raw
    /// features. Relation graphs are built once here and never updated.
    pub fn build(dataset: &Dataset, config: &ModelConfig) -> Result<Self> {
        let adjacency = Rc::new(
            build_normalized_adjacency(&dataset.train, dataset.num_users, dataset.num_items)?
                .adjacency,
        );
        let mut item_graphs = Vec::new();
        let mut user_graphs = Vec::new();
        let mut item_features = Vec::new();
        let mut user_features = Vec::new();
        if config.modal.enabled {
            for m in config.active_modalities() {
                let item = dataset.item_features_for(m).ok_or_else(|| {
                    DreamError::Config(format!("missing {} item features", m.name()))
                })?;
                let user = dataset.user_features_for(m).ok_or_else(|| {
                    DreamError::Config(format!("missing {} user features", m.name()))
                })?;
                item_graphs.push((
                    m,
                    Rc::new(
                        build_relation_graph(
                            &item.features,
                            m,
                            GraphScope::ItemItem,
                            config.modal.k,
                            config.modal.self_loop,
                        )?
                        .matrix,
                    ),
                ));
                user_graphs.push((
                    m,
                    Rc::new(
                        build_relation_graph(
                            &user.features,
                            m,
                            GraphScope::UserUser,
                            config.modal.k,
                            config.modal.self_loop,
                        )?
                        .matrix,
                    ),
                ));
                item_features.push((m, item.features.clone()));
                user_features.push((m, user.features.clone()));
            }
        }
        let (raw_fused_item, raw_fused_user) = if config.modal.enabled {
            (
                fuse_raw_features(
                    lookup(&item_features, Modality::Vision),
                    lookup(&item_features, Modality::Text),
                    config.modal.vision_weight,
                )?,
                fuse_raw_features(
                    lookup(&user_features, Modality::Vision),
                    lookup(&user_features, Modality::Text),
                    config.modal.vision_weight,
                )?,
            )
        } else {
            (
                Tensor2D::zeros(dataset.num_items, 1),
                Tensor2D::zeros(dataset.num_users, 1),
            )
        };
        Ok(PreparedData {
            num_users: dataset.num_users,
            num_items: dataset.num_items,
            adjacency,
            item_graphs,
            user_graphs,
            item_features,
            user_features,
            raw_fused_item,
            raw_fused_user,
        })
    }

    /// Rebuild from pre-loaded pieces (cache path).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        adjacency: SparseMatrix,
        item_graphs: Vec<(Modality, SparseMatrix)>,
        user_graphs: Vec<(Modality, SparseMatrix)>,
        item_features: Vec<(Modality, Tensor2D)>,
        user_features: Vec<(Modality, Tensor2D)>,
        vision_weight: f32,
    ) -> Result<Self> {
        let (raw_fused_item, raw_fused_user) = if item_features.is_empty() {
            (
                Tensor2D::zeros(num_items, 1),
                Tensor2D::zeros(num_users, 1),
            )
        } else {
            (
                fuse_raw_features(
                    lookup(&item_features, Modality::Vision),
                    lookup(&item_features, Modality::Text),
                    vision_weight,
                )?,
                fuse_raw_features(
                    lookup(&user_features, Modality::Vision),
                    lookup(&user_features, Modality::Text),
                    vision_weight,
                )?,
            )
        };
        Ok(PreparedData {
            num_users,
            num_items,
            adjacency: Rc::new(adjacency),
            item_graphs: item_graphs
                .into_iter()
                .map(|(m, g)| (m, Rc::new(g)))
                .collect(),
            user_graphs: user_graphs
                .into_iter()
                .map(|(m, g)| (m, Rc::new(g)))
                .collect(),
            item_features,
            user_features,
            raw_fused_item,
            raw_fused_user,
        })
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub behavior_user: Var,
    pub behavior_item: Var,
    pub modal_user: Option<Var>,
    pub modal_item: Option<Var>,
    pub general_user: Var,
    pub general_item: Var,
    /// The raw ID-embedding leaf, for batch L2 regularization.
    pub embedding: Var,
}

/// f32 snapshots of both lines plus their sum.
#[derive(Debug, Clone)]
pub struct DualRepresentations {
    pub behavior_user: Tensor2D,
    pub behavior_item: Tensor2D,
    pub modal_user: Tensor2D,
    pub modal_item: Tensor2D,
    pub general_user: Tensor2D,
    pub general_item: Tensor2D,
}

impl DualRepresentations {
    pub fn new(
        behavior_user: Tensor2D,
        behavior_item: Tensor2D,
        modal_user: Tensor2D,
        modal_item: Tensor2D,
    ) -> Self {
        // The sum is recomputed in f32 so general = behavior + modal holds
        // exactly on the snapshot.
        let add = |a: &Tensor2D, b: &Tensor2D| {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            Tensor2D {
                rows: a.rows,
                cols: a.cols,
                data,
            }
        };
        let general_user = add(&behavior_user, &modal_user);
        let general_item = add(&behavior_item, &modal_item);
        DualRepresentations {
            behavior_user,
            behavior_item,
            modal_user,
            modal_item,
            general_user,
            general_item,
        }
    }
}

/// Graph convolution over the interaction graph followed by the mean over
/// layer outputs; returns the user rows and item rows separately.
pub fn behavior_forward(
    tape: &mut Tape,
    adjacency: Rc<SparseMatrix>,
    embedding: Var,
    layers: usize,
    num_users: usize,
    num_items: usize,
) -> Result<(Var, Var)> {
    let (rows, _) = tape.shape(embedding);
    if rows != num_users + num_items {
        return Err(DreamError::Dimension {
            context: "behavior_forward embedding rows".into(),
            expected: num_users + num_items,
            found: rows,
        });
    }
    let mut current = embedding;
    let mut acc = embedding;
    for _ in 0..layers {
        current = tape.spmm(Rc::clone(&adjacency), current)?;
        acc = tape.add(acc, current)?;
    }
    let mean = tape.scale(acc, 1.0 / (layers as f64 + 1.0));
    let users = tape.slice_rows(mean, 0, num_users)?;
    let items = tape.slice_rows(mean, num_users, num_items)?;
    Ok((users, items))
}

/// sigmoid(features * w + b) elementwise-times the behavior embedding.
pub fn filter_gate(
    tape: &mut Tape,
    modal_features: Var,
    behavior: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let proj = tape.matmul(modal_features, w)?;
    let proj = tape.add_row(proj, b)?;
    let gate = tape.sigmoid(proj);
    tape.mul(gate, behavior)
}

/// Weighted fusion of per-modality branches; a missing branch shifts its
/// weight onto the other.
pub fn fuse_modal(
    tape: &mut Tape,
    vision: Option<Var>,
    text: Option<Var>,
    vision_weight: f32,
) -> Result<Var> {
    match (vision, text) {
        (Some(v), Some(t)) => {
            let scaled = tape.scale(v, vision_weight as f64);
            tape.add_scaled(scaled, t, 1.0 - vision_weight as f64)
        }
        (Some(v), None) => Ok(v),
        (None, Some(t)) => Ok(t),
        (None, None) => Err(DreamError::Config(
            "modal line needs at least one enabled modality".into(),
        )),
    }
}

/// The full model: parameter set plus configuration.
pub struct DreamModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub num_users: usize,
    pub num_items: usize,
}

fn gate_param_names(m: Modality) -> (String, String) {
    (format!("gate_w_{}", m.name()), format!("gate_b_{}", m.name()))
}

impl DreamModel {
    /// Initialize parameters: the ID-embedding table plus one shared gate
    /// (weight, bias) pair per active modality.
    pub fn new(prepared: &PreparedData, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.modal.enabled && config.active_modalities().is_empty() {
            return Err(DreamError::Config(
                "modal line enabled with every modality disabled".into(),
            ));
        }
        let d = config.behavior.dim;
        let mut params = ParamSet::default();
        let rows = prepared.num_users + prepared.num_items;
        params.add(ParamSlot::new(
            "embedding",
            xavier_init(rows, d, seed ^ crate::ingest::fnv1a64(b"embedding")),
            true,
        ));
        if config.modal.enabled {
            for m in config.active_modalities() {
                let feats = lookup(&prepared.item_features, m)
                    .ok_or_else(|| DreamError::Config(format!("missing {} features", m.name())))?;
                let (wn, bn) = gate_param_names(m);
                params.add(ParamSlot::new(
                    wn.clone(),
                    xavier_init(feats.cols, d, seed ^ crate::ingest::fnv1a64(wn.as_bytes())),
                    true,
                ));
                params.add(ParamSlot::new(bn, Tensor2D::zeros(1, d), true));
            }
        }
        Ok(DreamModel {
            config,
            params,
            num_users: prepared.num_users,
            num_items: prepared.num_items,
        })
    }

    /// One forward pass over the whole graph, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, prepared: &PreparedData) -> Result<ForwardVars> {
        self.forward_with(tape, &self.params, prepared)
    }

    /// Forward with an explicit parameter set (used by finite differences).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prepared: &PreparedData,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let emb_slot = params
            .index_of("embedding")
            .ok_or_else(|| DreamError::Internal("embedding slot missing".into()))?;
        let embedding = tape.param(params, emb_slot);
        let (behavior_user, behavior_item) = behavior_forward(
            tape,
            Rc::clone(&prepared.adjacency),
            embedding,
            cfg.behavior.layers,
            self.num_users,
            self.num_items,
        )?;

        let (modal_user, modal_item) = if cfg.modal.enabled {
            let (gate_user_src, gate_item_src) = match cfg.modal.gate_input {
                GateInput::Base => {
                    let u = tape.slice_rows(embedding, 0, self.num_users)?;
                    let i = tape.slice_rows(embedding, self.num_users, self.num_items)?;
                    (u, i)
                }
                GateInput::Aggregated => (behavior_user, behavior_item),
            };
            let (gate_user_src, gate_item_src) = if cfg.modal.detach_gate_behavior {
                (tape.stop_grad(gate_user_src), tape.stop_grad(gate_item_src))
            } else {
                (gate_user_src, gate_item_src)
            };

            let mut user_branches: Vec<(Modality, Var)> = Vec::new();
            let mut item_branches: Vec<(Modality, Var)> = Vec::new();
            for m in cfg.active_modalities() {
                let item_feats = lookup(&prepared.item_features, m).ok_or_else(|| {
                    DreamError::Config(format!("missing {} item features", m.name()))
                })?;
                let user_feats = lookup(&prepared.user_features, m).ok_or_else(|| {
                    DreamError::Config(format!("missing {} user features", m.name()))
                })?;
                let (wn, bn) = gate_param_names(m);
                let w_slot = params
                    .index_of(&wn)
                    .ok_or_else(|| DreamError::Internal(format!("{wn} slot missing")))?;
                let b_slot = params
                    .index_of(&bn)
                    .ok_or_else(|| DreamError::Internal(format!("{bn} slot missing")))?;
                let w = tape.param(params, w_slot);
                let b = tape.param(params, b_slot);
                let fi = tape.constant(item_feats);
                let fu = tape.constant(user_feats);

                let mut item_branch = if cfg.modal.use_filter_gate {
                    filter_gate(tape, fi, gate_item_src, w, b)?
                } else {
                    let proj = tape.matmul(fi, w)?;
                    tape.add_row(proj, b)?
                };
                let mut user_branch = if cfg.modal.use_filter_gate {
                    filter_gate(tape, fu, gate_user_src, w, b)?
                } else {
                    let proj = tape.matmul(fu, w)?;
                    tape.add_row(proj, b)?
                };

                if cfg.modal.use_item_graph {
                    let g = lookup(&prepared.item_graphs, m).ok_or_else(|| {
                        DreamError::Config(format!("missing {} item graph", m.name()))
                    })?;
                    for _ in 0..cfg.modal.modal_layers {
                        item_branch = tape.spmm(Rc::clone(g), item_branch)?;
                    }
                }
                if cfg.modal.use_user_graph {
                    let g = lookup(&prepared.user_graphs, m).ok_or_else(|| {
                        DreamError::Config(format!("missing {} user graph", m.name()))
                    })?;
                    for _ in 0..cfg.modal.modal_layers {
                        user_branch = tape.spmm(Rc::clone(g), user_branch)?;
                    }
                }
                user_branches.push((m, user_branch));
                item_branches.push((m, item_branch));
            }
            let modal_user = fuse_modal(
                tape,
                lookup(&user_branches, Modality::Vision).copied(),
                lookup(&user_branches, Modality::Text).copied(),
                cfg.modal.vision_weight,
            )?;
            let modal_item = fuse_modal(
                tape,
                lookup(&item_branches, Modality::Vision).copied(),
                lookup(&item_branches, Modality::Text).copied(),
                cfg.modal.vision_weight,
            )?;
            (Some(modal_user), Some(modal_item))
        } else {
            (None, None)
        };

        let general_user = match modal_user {
            Some(m) => tape.add(behavior_user, m)?,
            None => behavior_user,
        };
        let general_item = match modal_item {
            Some(m) => tape.add(behavior_item, m)?,
            None => behavior_item,
        };
        Ok(ForwardVars {
            behavior_user,
            behavior_item,
            modal_user,
            modal_item,
            general_user,
            general_item,
            embedding,
        })
    }

    /// Forward pass snapshot for evaluation, diagnostics and export.
    pub fn representations(&self, prepared: &PreparedData) -> Result<DualRepresentations> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, prepared)?;
        let behavior_user = tape.to_tensor(fwd.behavior_user);
        let behavior_item = tape.to_tensor(fwd.behavior_item);
        let d = self.config.behavior.dim;
        let modal_user = fwd
            .modal_user
            .map(|v| tape.to_tensor(v))
            .unwrap_or_else(|| Tensor2D::zeros(self.num_users, d));
        let modal_item = fwd
            .modal_item
            .map(|v| tape.to_tensor(v))
            .unwrap_or_else(|| Tensor2D::zeros(self.num_items, d));
        Ok(DualRepresentations::new(
            behavior_user,
            behavior_item,
            modal_user,
            modal_item,
        ))
    }
}

/// Dot-product preference score between one user row and one item row.
pub fn score(user_row: &[f32], item_row: &[f32]) -> f32 {
    crate::tensor::dot(user_row, item_row)
}
