//! Subcommand implementations.

use crate::cache;
use crate::config::RunConfig;
use dream_core::diagnostics::{evaluate_line, AlignmentSeries, DriftSeries, Line, LineEvalTable};
use dream_core::error::{DreamError, Result};
use dream_core::eval::{evaluate, relevant_by_user, EvalReport};
use dream_core::model::{DreamModel, PreparedData};
use dream_core::objectives::BatchTriples;
use dream_core::params::{load_checkpoint, save_checkpoint};
use dream_core::sampling::{sample_batch_seeded, TrainIndex};
use dream_core::synthetic::{generate, SyntheticConfig};
use dream_core::train::{
    grad_check_model, train, train_with_epoch_hook, Ablation, LossTerm, TrainOutcome,
    TrainerConfig,
};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablations: Vec<Ablation>,
}

fn apply_overrides(config: &RunConfig, overrides: &RunOverrides) -> (TrainerConfig, PathBuf) {
    let mut trainer = config.trainer_config();
    if let Some(seed) = overrides.seed {
        trainer.seed = seed;
    }
    for a in &overrides.ablations {
        a.apply(&mut trainer.model, &mut trainer.weights);
    }
    let out = overrides
        .out
        .clone()
        .unwrap_or_else(|| config.data.out_dir.clone());
    (trainer, out)
}

pub fn cmd_prepare(config: &RunConfig) -> Result<()> {
    let (dir, reused) = cache::prepare(config)?;
    config.write_echo(&config.data.out_dir)?;
    println!(
        "{} cache at {}",
        if reused { "reused" } else { "wrote" },
        dir.display()
    );
    Ok(())
}

fn write_train_outputs(
    out_dir: &Path,
    variant: &str,
    trainer: &TrainerConfig,
    model: &DreamModel,
    outcome: &TrainOutcome,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    // Per-epoch JSONL log plus the per-step loss stream.
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.jsonl"))?);
    for e in &outcome.epochs {
        writeln!(log, "{}", serde_json::to_string(e)?)?;
    }
    log.flush()?;
    let mut steps =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("steps_log.jsonl"))?);
    for s in &outcome.steps {
        writeln!(steps, "{}", serde_json::to_string(s)?)?;
    }
    steps.flush()?;

    save_checkpoint(&model.params, &out_dir.join("checkpoint"))?;

    let mut drift = DriftSeries::default();
    let mut align = AlignmentSeries::default();
    for e in &outcome.epochs {
        if let Some(d) = e.drift {
            drift.push(e.epoch, d);
        }
        if let (Some(u), Some(i), Some(p)) = (
            e.dual_cosine_users,
            e.dual_cosine_items,
            e.dual_cosine_pooled,
        ) {
            align.push(e.epoch, u, i, p);
        }
    }
    if !drift.points.is_empty() {
        drift.write_csv(&out_dir.join("drift.csv"))?;
    }
    if !align.points.is_empty() {
        align.write_csv(&out_dir.join("alignment.csv"))?;
    }

    if let Some(report) = &outcome.test_report {
        std::fs::write(
            out_dir.join("eval_test.json"),
            serde_json::to_string_pretty(report)?,
        )?;
        append_metrics_csv(&out_dir.join("metrics.csv"), variant, trainer.seed, report)?;
    }
    Ok(())
}

fn append_metrics_csv(path: &Path, variant: &str, seed: u64, report: &EvalReport) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new {
        writeln!(f, "variant,seed,split,epoch,k,recall,ndcg")?;
    }
    for m in &report.metrics {
        writeln!(
            f,
            "{variant},{seed},{},{},{},{},{}",
            report.split,
            report.epoch.unwrap_or(0),
            m.k,
            m.recall,
            m.ndcg
        )?;
    }
    Ok(())
}

pub fn cmd_train(config: &RunConfig, overrides: &RunOverrides) -> Result<()> {
    let (trainer, out_dir) = apply_overrides(config, overrides);
    let (dataset, prepared) = cache::prepare_and_load(config, &trainer.model)?;
    std::fs::create_dir_all(&out_dir)?;
    config.write_echo(&out_dir)?;
    let mut model = DreamModel::new(&prepared, trainer.model, trainer.seed)?;
    let outcome = train(&mut model, &dataset, &prepared, &trainer)?;
    let variant = if overrides.ablations.is_empty() {
        "dream".to_string()
    } else {
        overrides
            .ablations
            .iter()
            .map(|a| a.flag())
            .collect::<Vec<_>>()
            .join("+")
    };
    write_train_outputs(&out_dir, &variant, &trainer, &model, &outcome)?;
    if let Some(report) = &outcome.test_report {
        for m in &report.metrics {
            println!(
                "test recall@{} = {:.4}  ndcg@{} = {:.4}",
                m.k, m.recall, m.k, m.ndcg
            );
        }
    }
    println!(
        "best epoch {} (val recall@20 = {:.4}); outputs in {}",
        outcome.best_epoch,
        outcome.best_val_recall,
        out_dir.display()
    );
    if let Some(reason) = &outcome.aborted {
        return Err(DreamError::NonFinite {
            term: format!("training aborted: {reason}; best checkpoint preserved"),
        });
    }
    Ok(())
}

/// Build a model shaped like the config and load checkpoint values into it,
/// verifying shapes.
fn model_from_checkpoint(
    trainer: &TrainerConfig,
    prepared: &PreparedData,
    checkpoint: &Path,
) -> Result<DreamModel> {
    let mut model = DreamModel::new(prepared, trainer.model, trainer.seed)?;
    let loaded = load_checkpoint(checkpoint)?;
    for slot in &model.params.slots {
        let found = loaded.get(&slot.name).ok_or_else(|| {
            DreamError::Config(format!("checkpoint missing parameter `{}`", slot.name))
        })?;
        if found.value.rows != slot.value.rows || found.value.cols != slot.value.cols {
            return Err(DreamError::Dimension {
                context: format!("checkpoint parameter `{}`", slot.name),
                expected: slot.value.rows * slot.value.cols,
                found: found.value.rows * found.value.cols,
            });
        }
    }
    model.params = loaded;
    Ok(model)
}

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    split: &str,
    overrides: &RunOverrides,
) -> Result<()> {
    let (trainer, out_dir) = apply_overrides(config, overrides);
    let (dataset, prepared) = cache::prepare_and_load(config, &trainer.model)?;
    let model = model_from_checkpoint(&trainer, &prepared, checkpoint)?;
    let interactions = match split {
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(DreamError::Config(format!(
                "unknown split `{other}` (expected val or test)"
            )))
        }
    };
    let reprs = model.representations(&prepared)?;
    let relevant = relevant_by_user(interactions, dataset.num_users);
    let report = evaluate(
        &reprs.general_user,
        &reprs.general_item,
        &relevant,
        &dataset.train_items_by_user(),
        &trainer.eval_ks,
        true,
        split,
    )?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join(format!("eval_{split}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    for m in &report.metrics {
        println!(
            "{split} recall@{} = {:.4}  ndcg@{} = {:.4}",
            m.k, m.recall, m.k, m.ndcg
        );
    }
    Ok(())
}

pub fn cmd_ablate(
    config: &RunConfig,
    rows: &[Ablation],
    overrides: &RunOverrides,
) -> Result<()> {
    let (base_trainer, out_dir) = apply_overrides(config, overrides);
    std::fs::create_dir_all(&out_dir)?;
    config.write_echo(&out_dir)?;
    let mut variants: Vec<(String, Option<Ablation>)> = vec![("full".into(), None)];
    variants.extend(rows.iter().map(|a| (a.flag().to_string(), Some(*a))));

    let path = out_dir.join("ablate.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let mut header = String::from("variant");
    for k in &base_trainer.eval_ks {
        header.push_str(&format!(",recall@{k},ndcg@{k}"));
    }
    writeln!(f, "{header}")?;

    for (name, ablation) in variants {
        let mut trainer = base_trainer.clone();
        if let Some(a) = ablation {
            a.apply(&mut trainer.model, &mut trainer.weights);
        }
        let (dataset, prepared) = cache::prepare_and_load(config, &trainer.model)?;
        let mut model = DreamModel::new(&prepared, trainer.model, trainer.seed)?;
        let outcome = train(&mut model, &dataset, &prepared, &trainer)?;
        let report = outcome.test_report.as_ref().ok_or_else(|| {
            DreamError::Config("ablation study needs a non-empty test split".into())
        })?;
        let mut row = name.clone();
        for k in &trainer.eval_ks {
            row.push_str(&format!(
                ",{:.6},{:.6}",
                report.recall_at(*k).unwrap_or(f64::NAN),
                report.ndcg_at(*k).unwrap_or(f64::NAN)
            ));
        }
        writeln!(f, "{row}")?;
        println!("{row}");
    }
    f.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_diagnose(config: &RunConfig, overrides: &RunOverrides) -> Result<()> {
    let (trainer, out_dir) = apply_overrides(config, overrides);
    let (dataset, prepared) = cache::prepare_and_load(config, &trainer.model)?;
    std::fs::create_dir_all(&out_dir)?;
    config.write_echo(&out_dir)?;
    let mut model = DreamModel::new(&prepared, trainer.model, trainer.seed)?;

    let val_relevant = relevant_by_user(&dataset.val, dataset.num_users);
    let train_items = dataset.train_items_by_user();
    let mut line_table = LineEvalTable::default();
    let ks = trainer.eval_ks.clone();
    let outcome = train_with_epoch_hook(
        &mut model,
        &dataset,
        &prepared,
        &trainer,
        |epoch, reprs| {
            for line in Line::all() {
                if let Ok(report) =
                    evaluate_line(reprs, line, &val_relevant, &train_items, &ks, "val")
                {
                    line_table.push_report(epoch, line, &report);
                }
            }
        },
    )?;
    write_train_outputs(&out_dir, "diagnose", &trainer, &model, &outcome)?;
    line_table.write_csv(&out_dir.join("line_eval.csv"))?;
    println!(
        "wrote drift.csv, alignment.csv, line_eval.csv to {}",
        out_dir.display()
    );
    if let Some(reason) = &outcome.aborted {
        return Err(DreamError::NonFinite {
            term: format!("training aborted: {reason}"),
        });
    }
    Ok(())
}

pub fn cmd_gradcheck(config: &RunConfig, overrides: &RunOverrides) -> Result<()> {
    let (trainer, _) = apply_overrides(config, overrides);
    let (dataset, prepared) = cache::prepare_and_load(config, &trainer.model)?;
    let mut model = DreamModel::new(&prepared, trainer.model, trainer.seed)?;
    let index = TrainIndex::new(&dataset.train, dataset.num_users, dataset.num_items);
    let batch_size = trainer.batch_size.min(dataset.train.len()).max(2);
    let batch: BatchTriples = sample_batch_seeded(&index, batch_size, trainer.seed)?;

    let terms: Vec<LossTerm> = LossTerm::all()
        .into_iter()
        .filter(|t| {
            trainer.model.modal.enabled
                || matches!(t, LossTerm::Bpr | LossTerm::IntraBehavior | LossTerm::Total)
        })
        .collect();
    let mut failed: Option<(LossTerm, f64)> = None;
    for term in terms {
        let report = grad_check_model(
            &mut model,
            &prepared,
            &batch,
            &trainer.weights,
            term,
            1e-4,
            1e-3,
            200,
            trainer.seed,
        )?;
        let status = if report.pass { "ok" } else { "FAIL" };
        println!(
            "{:<16} max rel err {:.3e}  ({} coordinates)  {status}",
            term.name(),
            report.max_rel_err(),
            report.entries.iter().map(|e| e.checked).sum::<usize>()
        );
        if !report.pass && failed.is_none() {
            failed = Some((term, report.max_rel_err()));
        }
    }
    match failed {
        Some((term, err)) => Err(DreamError::GradCheckFailed {
            term: term.name().into(),
            max_rel_err: err,
        }),
        None => {
            println!("gradient check passed");
            Ok(())
        }
    }
}

pub fn cmd_export_embeddings(
    config: &RunConfig,
    checkpoint: &Path,
    overrides: &RunOverrides,
) -> Result<()> {
    let (trainer, out_dir) = apply_overrides(config, overrides);
    let (_, prepared) = cache::prepare_and_load(config, &trainer.model)?;
    let model = model_from_checkpoint(&trainer, &prepared, checkpoint)?;
    let reprs = model.representations(&prepared)?;
    std::fs::create_dir_all(&out_dir)?;
    let pairs = [
        ("behavior_user", &reprs.behavior_user),
        ("behavior_item", &reprs.behavior_item),
        ("modal_user", &reprs.modal_user),
        ("modal_item", &reprs.modal_item),
        ("general_user", &reprs.general_user),
        ("general_item", &reprs.general_item),
    ];
    for (name, tensor) in pairs {
        tensor.write_f32_file(&out_dir.join(format!("{name}.f32")))?;
        std::fs::write(
            out_dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&serde_json::json!({
                "rows": tensor.rows,
                "dim": tensor.cols,
                "name": name,
            }))?,
        )?;
    }
    println!("exported 6 matrices to {}", out_dir.display());
    Ok(())
}

pub struct GenArgs {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub dim: usize,
    pub interactions_per_user: usize,
    pub in_block_prob: f64,
    pub feature_noise: f32,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_gen_synthetic(args: &GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        users: args.users,
        items: args.items,
        blocks: args.blocks,
        feature_dim: args.dim,
        interactions_per_user: args.interactions_per_user,
        in_block_prob: args.in_block_prob,
        feature_noise: args.feature_noise,
        seed: args.seed,
    };
    let (interactions, vision, text) = generate(&cfg);
    std::fs::create_dir_all(&args.out)?;
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(args.out.join("interactions.tsv"))?);
    for e in &interactions {
        writeln!(f, "u{}\ti{}", e.user, e.item)?;
    }
    f.flush()?;
    dream_core::ingest::write_feature_files(&args.out.join("image"), &vision)?;
    dream_core::ingest::write_feature_files(&args.out.join("text"), &text)?;
    println!(
        "wrote {} interactions and {}x{} features per modality to {}",
        interactions.len(),
        args.items,
        args.dim,
        args.out.display()
    );
    Ok(())
}
