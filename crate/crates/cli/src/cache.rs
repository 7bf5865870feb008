//! The prepare pipeline and its on-disk cache: ingest, filter, split, derive
//! user features, build graphs, all keyed by a content hash so repeated runs
//! reuse earlier work.

use crate::config::RunConfig;
use dream_core::error::{DreamError, Result};
use dream_core::graph::{build_normalized_adjacency, build_relation_graph, GraphScope};
use dream_core::ingest::{
    self, fnv1a64, Dataset, ModalFeatureMatrix, Modality, SplitManifest,
};
use dream_core::model::{ModelConfig, PreparedData};
use dream_core::sparse::SparseMatrix;
use dream_core::tensor::Tensor2D;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    version: u32,
    num_users: usize,
    num_items: usize,
    kcore: usize,
    ratios: (f64, f64, f64),
    split_seed: u64,
    graph_k: usize,
    self_loop: bool,
    modalities: Vec<String>,
}

const CACHE_VERSION: u32 = 1;

/// Content hash over the raw inputs and every parameter that changes the
/// prepared artifacts. Different k values key different cache entries.
pub fn cache_key(config: &RunConfig) -> Result<String> {
    let mut acc: u64 = 0xcbf29ce484222325;
    let mut mix = |bytes: &[u8]| {
        acc ^= fnv1a64(bytes);
        acc = acc.wrapping_mul(0x100000001b3);
    };
    mix(&std::fs::read(&config.data.interactions)?);
    for stem in [&config.data.vision_features, &config.data.text_features]
        .into_iter()
        .flatten()
    {
        for ext in ["f32", "json", "csv"] {
            let p = stem.with_extension(ext);
            if p.exists() {
                mix(&std::fs::read(&p)?);
            }
        }
    }
    mix(&config.data.kcore.to_le_bytes());
    mix(&config.split.train.to_le_bytes());
    mix(&config.split.val.to_le_bytes());
    mix(&config.split.test.to_le_bytes());
    mix(&config.split.seed.to_le_bytes());
    mix(&config.graph.k.to_le_bytes());
    mix(&[config.graph.self_loop as u8]);
    Ok(format!("{acc:016x}"))
}

fn modality_stems(config: &RunConfig) -> Vec<(Modality, &PathBuf)> {
    let mut v = Vec::new();
    if let Some(p) = &config.data.vision_features {
        v.push((Modality::Vision, p));
    }
    if let Some(p) = &config.data.text_features {
        v.push((Modality::Text, p));
    }
    v
}

/// Align a raw feature matrix with the post-filter item indexing. Accepts
/// matrices already in filtered order or in raw (pre-filter) order.
fn reindex_features(
    f: ModalFeatureMatrix,
    raw_items: usize,
    item_map: &[u32],
) -> Result<ModalFeatureMatrix> {
    if f.rows() == item_map.len() {
        return Ok(f);
    }
    if f.rows() == raw_items {
        let mut t = Tensor2D::zeros(item_map.len(), f.dim());
        for (new, &old) in item_map.iter().enumerate() {
            t.row_mut(new).copy_from_slice(f.features.row(old as usize));
        }
        return Ok(ModalFeatureMatrix {
            modality: f.modality,
            features: t,
        });
    }
    Err(DreamError::Dimension {
        context: format!("{} feature rows", f.modality.name()),
        expected: item_map.len(),
        found: f.rows(),
    })
}

/// Run the full ingest + graph pipeline and persist it under
/// `cache_dir/<key>/`. Returns the cache directory and whether it was reused.
pub fn prepare(config: &RunConfig) -> Result<(PathBuf, bool)> {
    let key = cache_key(config)?;
    let dir = config.data.cache_dir.join(&key);
    if dir.join("meta.json").exists() {
        return Ok((dir, true));
    }
    std::fs::create_dir_all(&dir)?;

    let loaded = ingest::load_interactions(&config.data.interactions)?;
    let filtered = ingest::kcore_filter(&loaded.interactions, config.data.kcore)?;
    let splits = ingest::split_dataset(
        &filtered.interactions,
        (config.split.train, config.split.val, config.split.test),
        config.split.seed,
    )?;

    // Compose raw-id -> final-index maps for reproducibility and for users
    // aligning external feature files. BTreeMap keeps the JSON byte-stable.
    let user_final: BTreeMap<&String, u32> = {
        let mut inv = vec![u32::MAX; loaded.num_users];
        for (new, &old) in filtered.user_map.iter().enumerate() {
            inv[old as usize] = new as u32;
        }
        loaded
            .user_ids
            .iter()
            .filter(|(_, &old)| inv[old as usize] != u32::MAX)
            .map(|(raw, &old)| (raw, inv[old as usize]))
            .collect()
    };
    let item_final: BTreeMap<&String, u32> = {
        let mut inv = vec![u32::MAX; loaded.num_items];
        for (new, &old) in filtered.item_map.iter().enumerate() {
            inv[old as usize] = new as u32;
        }
        loaded
            .item_ids
            .iter()
            .filter(|(_, &old)| inv[old as usize] != u32::MAX)
            .map(|(raw, &old)| (raw, inv[old as usize]))
            .collect()
    };
    std::fs::write(
        dir.join("id_maps.json"),
        serde_json::to_string(&serde_json::json!({
            "users": user_final,
            "items": item_final,
        }))?,
    )?;

    let manifest = SplitManifest::from_splits(filtered.num_users, filtered.num_items, &splits);
    std::fs::write(dir.join("splits.json"), serde_json::to_string(&manifest)?)?;

    let item_features: Vec<ModalFeatureMatrix> = modality_stems(config)
        .into_iter()
        .map(|(m, stem)| {
            let f = ingest::read_feature_files(stem, m)?;
            reindex_features(f, loaded.num_items, &filtered.item_map)
        })
        .collect::<Result<_>>()?;
    let dataset = Dataset::assemble(
        filtered.num_users,
        filtered.num_items,
        splits,
        item_features,
    )?;

    let mut modalities = Vec::new();
    for f in &dataset.item_features {
        let m = f.modality;
        ingest::write_feature_files(&dir.join(format!("item_{}", m.name())), f)?;
        let uf = dataset.user_features_for(m).expect("derived");
        ingest::write_feature_files(&dir.join(format!("user_{}", m.name())), uf)?;
        modalities.push(m.name().to_string());

        let ig = build_relation_graph(
            &f.features,
            m,
            GraphScope::ItemItem,
            config.graph.k,
            config.graph.self_loop,
        )?;
        ig.matrix
            .write_files(&dir.join(format!("item_{}_graph", m.name())))?;
        let ug = build_relation_graph(
            &uf.features,
            m,
            GraphScope::UserUser,
            config.graph.k,
            config.graph.self_loop,
        )?;
        ug.matrix
            .write_files(&dir.join(format!("user_{}_graph", m.name())))?;
    }

    let adjacency =
        build_normalized_adjacency(&dataset.train, dataset.num_users, dataset.num_items)?;
    adjacency.adjacency.write_files(&dir.join("adjacency"))?;

    let meta = CacheMeta {
        version: CACHE_VERSION,
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        kcore: config.data.kcore,
        ratios: (config.split.train, config.split.val, config.split.test),
        split_seed: config.split.seed,
        graph_k: config.graph.k,
        self_loop: config.graph.self_loop,
        modalities,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok((dir, false))
}

fn parse_modality(name: &str) -> Result<Modality> {
    match name {
        "vision" => Ok(Modality::Vision),
        "text" => Ok(Modality::Text),
        other => Err(DreamError::Config(format!("unknown modality `{other}`"))),
    }
}

/// Load a prepared cache directory back into memory.
pub fn load(dir: &Path, model_config: &ModelConfig) -> Result<(Dataset, PreparedData)> {
    let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.version != CACHE_VERSION {
        return Err(DreamError::Config(format!(
            "cache version {} unsupported (expected {CACHE_VERSION}); delete {}",
            meta.version,
            dir.display()
        )));
    }
    let manifest: SplitManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json"))?)?;
    let splits = manifest.to_splits();

    let mut item_features = Vec::new();
    let mut user_features = Vec::new();
    let mut item_graphs = Vec::new();
    let mut user_graphs = Vec::new();
    for name in &meta.modalities {
        let m = parse_modality(name)?;
        let itf = ingest::read_feature_files(&dir.join(format!("item_{name}")), m)?;
        let usf = ingest::read_feature_files(&dir.join(format!("user_{name}")), m)?;
        item_features.push((m, itf.features.clone()));
        user_features.push((m, usf.features.clone()));
        item_graphs.push((m, SparseMatrix::read_files(&dir.join(format!("item_{name}_graph")))?));
        user_graphs.push((m, SparseMatrix::read_files(&dir.join(format!("user_{name}_graph")))?));
    }
    let adjacency = SparseMatrix::read_files(&dir.join("adjacency"))?;

    let dataset = Dataset {
        num_users: meta.num_users,
        num_items: meta.num_items,
        train: splits.train,
        val: splits.val,
        test: splits.test,
        item_features: item_features
            .iter()
            .map(|(m, t)| ModalFeatureMatrix {
                modality: *m,
                features: t.clone(),
            })
            .collect(),
        user_features: user_features
            .iter()
            .map(|(m, t)| ModalFeatureMatrix {
                modality: *m,
                features: t.clone(),
            })
            .collect(),
    };
    // Keep only the modalities the model config actually enables.
    let keep = |m: Modality| match m {
        Modality::Vision => model_config.modal.use_vision,
        Modality::Text => model_config.modal.use_text,
    };
    let prepared = PreparedData::from_parts(
        meta.num_users,
        meta.num_items,
        adjacency,
        item_graphs.into_iter().filter(|(m, _)| keep(*m)).collect(),
        user_graphs.into_iter().filter(|(m, _)| keep(*m)).collect(),
        item_features.into_iter().filter(|(m, _)| keep(*m)).collect(),
        user_features.into_iter().filter(|(m, _)| keep(*m)).collect(),
        model_config.modal.vision_weight,
    )?;
    Ok((dataset, prepared))
}

/// Prepare (or reuse the cache) and load, honoring the model configuration.
pub fn prepare_and_load(
    config: &RunConfig,
    model_config: &ModelConfig,
) -> Result<(Dataset, PreparedData)> {
    let (dir, reused) = prepare(config)?;
    if reused {
        eprintln!("reusing cache {}", dir.display());
    } else {
        eprintln!("prepared cache {}", dir.display());
    }
    load(&dir, model_config)
}
