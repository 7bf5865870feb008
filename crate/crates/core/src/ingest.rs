//! Interaction/feature loading, k-core filtering, splitting, user features.

use crate::error::{DreamError, Result};
use crate::tensor::Tensor2D;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

/// One observed user-item interaction, 0-based dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

/// Dense per-row feature table for one modality.
#[derive(Debug, Clone)]
pub struct ModalFeatureMatrix {
    pub modality: Modality,
    pub features: Tensor2D,
}

impl ModalFeatureMatrix {
    pub fn rows(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }
}

/// Interactions plus the raw-id maps produced while loading.
#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// raw id -> dense index
    pub user_ids: HashMap<String, u32>,
    pub item_ids: HashMap<String, u32>,
}

/// Load tab-separated `user_id<TAB>item_id[<TAB>extra...]` lines. Ids are
/// assigned dense 0-based indices in first-appearance order; duplicate
/// (user, item) pairs collapse to one interaction; extra columns are ignored.
pub fn load_interactions(path: &Path) -> Result<LoadedInteractions> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut item_ids: HashMap<String, u32> = HashMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut interactions = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let user_raw = parts.next().filter(|s| !s.is_empty());
        let item_raw = parts.next().filter(|s| !s.is_empty());
        let (user_raw, item_raw) = match (user_raw, item_raw) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(DreamError::Parse {
                    line: lineno + 1,
                    msg: format!("expected `user<TAB>item`, got `{line}`"),
                })
            }
        };
        let next_user = user_ids.len() as u32;
        let user = *user_ids.entry(user_raw.to_string()).or_insert(next_user);
        let next_item = item_ids.len() as u32;
        let item = *item_ids.entry(item_raw.to_string()).or_insert(next_item);
        if seen.insert((user, item)) {
            interactions.push(Interaction { user, item });
        }
    }
    if interactions.is_empty() {
        return Err(DreamError::EmptyDataset(format!(
            "no interactions in {}",
            path.display()
        )));
    }
    Ok(LoadedInteractions {
        interactions,
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        user_ids,
        item_ids,
    })
}

/// Result of k-core filtering: surviving interactions with dense reindexing,
/// plus new-index -> old-index maps for realigning side data.
#[derive(Debug, Clone)]
pub struct KcoreResult {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// new user index -> old user index
    pub user_map: Vec<u32>,
    /// new item index -> old item index
    pub item_map: Vec<u32>,
}

/// Iteratively remove users and items with degree < k until fixpoint, then
/// reindex densely (relative order preserved).
pub fn kcore_filter(interactions: &[Interaction], k: usize) -> Result<KcoreResult> {
    assert!(k >= 1, "k-core requires k >= 1");
    let num_users = interactions.iter().map(|e| e.user + 1).max().unwrap_or(0) as usize;
    let num_items = interactions.iter().map(|e| e.item + 1).max().unwrap_or(0) as usize;
    let mut alive: Vec<bool> = vec![true; interactions.len()];
    let mut user_deg = vec![0usize; num_users];
    let mut item_deg = vec![0usize; num_items];
    for e in interactions {
        user_deg[e.user as usize] += 1;
        item_deg[e.item as usize] += 1;
    }
    loop {
        let mut changed = false;
        for (i, e) in interactions.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            if user_deg[e.user as usize] < k || item_deg[e.item as usize] < k {
                alive[i] = false;
                user_deg[e.user as usize] -= 1;
                item_deg[e.item as usize] -= 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let survivors: Vec<Interaction> = interactions
        .iter()
        .zip(&alive)
        .filter_map(|(e, &a)| a.then_some(*e))
        .collect();
    if survivors.is_empty() {
        return Err(DreamError::EmptyAfterFilter { k });
    }
    // Dense reindex in order of surviving old indices.
    let mut user_new = vec![u32::MAX; num_users];
    let mut item_new = vec![u32::MAX; num_items];
    let mut user_map = Vec::new();
    let mut item_map = Vec::new();
    for old in 0..num_users {
        if user_deg[old] > 0 {
            user_new[old] = user_map.len() as u32;
            user_map.push(old as u32);
        }
    }
    for old in 0..num_items {
        if item_deg[old] > 0 {
            item_new[old] = item_map.len() as u32;
            item_map.push(old as u32);
        }
    }
    let interactions = survivors
        .into_iter()
        .map(|e| Interaction {
            user: user_new[e.user as usize],
            item: item_new[e.item as usize],
        })
        .collect();
    Ok(KcoreResult {
        interactions,
        num_users: user_map.len(),
        num_items: item_map.len(),
        user_map,
        item_map,
    })
}

/// Train/val/test interaction lists; together they partition the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Per-user random split. Each user keeps at least one training interaction;
/// val/test sizes are floor(n * ratio). Items that would otherwise appear
/// only in val/test are folded back into train so that every evaluated item
/// has at least one training edge. Deterministic given `seed`.
pub fn split_dataset(
    interactions: &[Interaction],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Splits> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(DreamError::Config(format!(
            "split ratios must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let mut by_user: HashMap<u32, Vec<u32>> = HashMap::new();
    for e in interactions {
        by_user.entry(e.user).or_default().push(e.item);
    }
    let mut users: Vec<u32> = by_user.keys().copied().collect();
    users.sort_unstable();

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for &user in &users {
        let mut items = by_user.remove(&user).unwrap();
        items.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&user.to_le_bytes()));
        items.shuffle(&mut rng);
        let n = items.len();
        let mut n_val = (n as f64 * va).floor() as usize;
        let mut n_test = (n as f64 * te).floor() as usize;
        // Keep at least one training interaction per user.
        while n_val + n_test >= n && n_val + n_test > 0 {
            if n_test > 0 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        let n_train = n - n_val - n_test;
        for (i, item) in items.into_iter().enumerate() {
            let e = Interaction { user, item };
            if i < n_train {
                train.push(e);
            } else if i < n_train + n_val {
                val.push(e);
            } else {
                test.push(e);
            }
        }
    }

    // Fold val/test interactions whose item never occurs in train back into
    // train; evaluation and user-feature derivation need a training edge for
    // every referenced item.
    let num_items = interactions.iter().map(|e| e.item + 1).max().unwrap_or(0) as usize;
    let mut item_train_deg = vec![0usize; num_items];
    for e in &train {
        item_train_deg[e.item as usize] += 1;
    }
    for split in [&mut val, &mut test] {
        split.sort_unstable();
        let mut kept = Vec::with_capacity(split.len());
        for e in split.drain(..) {
            if item_train_deg[e.item as usize] == 0 {
                item_train_deg[e.item as usize] += 1;
                train.push(e);
            } else {
                kept.push(e);
            }
        }
        *split = kept;
    }
    train.sort_unstable();
    Ok(Splits { train, val, test })
}

/// User modal features: row u is the mean of the feature rows of the items
/// the user interacted with in the training split. Users with no training
/// items get a zero row (and a warning).
pub fn derive_user_features(
    train: &[Interaction],
    item_features: &ModalFeatureMatrix,
    num_users: usize,
) -> ModalFeatureMatrix {
    let dim = item_features.dim();
    let mut acc = vec![0.0f64; num_users * dim];
    let mut counts = vec![0usize; num_users];
    for e in train {
        let row = item_features.features.row(e.item as usize);
        let dst = &mut acc[e.user as usize * dim..(e.user as usize + 1) * dim];
        for (d, v) in dst.iter_mut().zip(row) {
            *d += *v as f64;
        }
        counts[e.user as usize] += 1;
    }
    let mut data = vec![0.0f32; num_users * dim];
    for u in 0..num_users {
        if counts[u] == 0 {
            eprintln!("warning: user {u} has no training items; zero feature row");
            continue;
        }
        let inv = 1.0 / counts[u] as f64;
        for d in 0..dim {
            data[u * dim + d] = (acc[u * dim + d] * inv) as f32;
        }
    }
    ModalFeatureMatrix {
        modality: item_features.modality,
        features: Tensor2D::from_data(num_users, dim, data).expect("shape computed here"),
    }
}

/// Full dataset after ingest: counts, splits, and per-modality features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub item_features: Vec<ModalFeatureMatrix>,
    pub user_features: Vec<ModalFeatureMatrix>,
}

impl Dataset {
    /// Assemble a dataset from splits and item features, deriving user
    /// features from the training split.
    pub fn assemble(
        num_users: usize,
        num_items: usize,
        splits: Splits,
        item_features: Vec<ModalFeatureMatrix>,
    ) -> Result<Self> {
        for f in &item_features {
            if f.rows() != num_items {
                return Err(DreamError::Dimension {
                    context: format!("{} item features", f.modality.name()),
                    expected: num_items,
                    found: f.rows(),
                });
            }
        }
        let user_features = item_features
            .iter()
            .map(|f| derive_user_features(&splits.train, f, num_users))
            .collect();
        Ok(Dataset {
            num_users,
            num_items,
            train: splits.train,
            val: splits.val,
            test: splits.test,
            item_features,
            user_features,
        })
    }

    pub fn item_features_for(&self, m: Modality) -> Option<&ModalFeatureMatrix> {
        self.item_features.iter().find(|f| f.modality == m)
    }

    pub fn user_features_for(&self, m: Modality) -> Option<&ModalFeatureMatrix> {
        self.user_features.iter().find(|f| f.modality == m)
    }

    /// Training items per user, sorted; index = user.
    pub fn train_items_by_user(&self) -> Vec<Vec<u32>> {
        let mut by_user = vec![Vec::new(); self.num_users];
        for e in &self.train {
            by_user[e.user as usize].push(e.item);
        }
        for v in &mut by_user {
            v.sort_unstable();
        }
        by_user
    }
}

/// Sidecar header for `<stem>.f32` feature files.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub rows: usize,
    pub dim: usize,
    pub modality: String,
}

/// Read `<stem>.f32` + `<stem>.json`, or fall back to `<stem>.csv` when the
/// binary pair is missing.
pub fn read_feature_files(stem: &Path, modality: Modality) -> Result<ModalFeatureMatrix> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("f32");
    let features = if json_path.exists() && bin_path.exists() {
        let sidecar: FeatureSidecar = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
            .map_err(|e| {
            DreamError::Parse {
                line: 0,
                msg: format!("sidecar {}: {e}", json_path.display()),
            }
        })?;
        if sidecar.modality != modality.name() {
            eprintln!(
                "warning: {} declares modality `{}` but is loaded as `{}`",
                json_path.display(),
                sidecar.modality,
                modality.name()
            );
        }
        Tensor2D::read_f32_file(&bin_path, sidecar.rows, sidecar.dim)?
    } else {
        read_feature_csv(&stem.with_extension("csv"))?
    };
    if features.rows == 0 || features.cols == 0 {
        return Err(DreamError::EmptyDataset(format!(
            "feature file {} is empty",
            stem.display()
        )));
    }
    if let Some(idx) = features.first_non_finite() {
        return Err(DreamError::Parse {
            line: idx / features.cols + 1,
            msg: format!("non-finite feature value in {}", stem.display()),
        });
    }
    Ok(ModalFeatureMatrix { modality, features })
}

pub fn write_feature_files(stem: &Path, features: &ModalFeatureMatrix) -> Result<()> {
    let sidecar = FeatureSidecar {
        rows: features.rows(),
        dim: features.dim(),
        modality: features.modality.name().to_string(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    features.features.write_f32_file(&stem.with_extension("f32"))
}

fn read_feature_csv(path: &Path) -> Result<Tensor2D> {
    let content = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f32>, _> =
            line.split(',').map(|v| v.trim().parse::<f32>()).collect();
        let row = row.map_err(|e| DreamError::Parse {
            line: lineno + 1,
            msg: format!("{e} in {}", path.display()),
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(DreamError::Parse {
                    line: lineno + 1,
                    msg: "ragged CSV row".into(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DreamError::EmptyDataset(format!("{}", path.display())));
    }
    Ok(Tensor2D::from_rows(&rows))
}

/// JSON manifest of the (user, item) pairs per split, for reproducibility.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub val: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

impl SplitManifest {
    pub fn from_splits(num_users: usize, num_items: usize, splits: &Splits) -> Self {
        let conv = |v: &[Interaction]| v.iter().map(|e| (e.user, e.item)).collect();
        SplitManifest {
            num_users,
            num_items,
            train: conv(&splits.train),
            val: conv(&splits.val),
            test: conv(&splits.test),
        }
    }

    pub fn to_splits(&self) -> Splits {
        let conv = |v: &[(u32, u32)]| {
            v.iter()
                .map(|&(user, item)| Interaction { user, item })
                .collect()
        };
        Splits {
            train: conv(&self.train),
            val: conv(&self.val),
            test: conv(&self.test),
        }
    }
}

/// FNV-1a, used for deterministic per-key seed derivation and cache keys.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
