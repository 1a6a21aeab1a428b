//! The subcommands. Each computes everything first and writes its outputs
//! through one [`Staged`] directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use tlsi_core::checkpoint;
use tlsi_core::data::{
    generate_synthetic, load_behavior_log, read_records, validate_synthetic, write_jsonl, Dataset,
};
use tlsi_core::experiment::{prepare_splits, run};
use tlsi_core::gradcheck::{run_gradcheck, GradcheckConfig};
use tlsi_core::{evaluate, MetricsReport, Variant};

use crate::config::{usage, RunConfig};
use crate::output::Staged;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SPEC_FILE: &str = "spec.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const GATES_FILE: &str = "gates.csv";
pub const ATTENTION_FILE: &str = "attention.csv";

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    test: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation: Option<&'a MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch_losses: Option<&'a [f64]>,
    config: serde_json::Value,
}

/// CSV with an explicit header, so an empty table still has one.
fn csv_bytes<R: Serialize>(header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

pub fn generate(c: &RunConfig, out: &Path) -> Result<()> {
    let spec = c.generate.spec()?;
    let records = generate_synthetic(&spec)?;
    let violations = validate_synthetic(&spec, &records);
    if spec.noise_rate == 0.0 && !violations.is_empty() {
        bail!(
            "noise-free log breaks {} planted constraints, first: {:?}",
            violations.len(),
            violations[0]
        );
    }
    let users: BTreeSet<_> = records.iter().map(|r| &r.user).collect();
    let mut events = Vec::new();
    write_jsonl(&mut events, &records)?;

    let staged = Staged::new(out)?;
    staged.write(EVENTS_FILE, events)?;
    staged.write_json(
        SPEC_FILE,
        &json!({
            "spec": spec,
            "events": records.len(),
            "users": users.len(),
            "violations": violations.len(),
        }),
    )?;
    let out = staged.commit()?;
    println!(
        "wrote {} events of {} users to {} ({} pattern violations)",
        records.len(),
        users.len(),
        out.join(EVENTS_FILE).display(),
        violations.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn train(c: &RunConfig, out: &Path) -> Result<()> {
    let file = c.data_file()?;
    let seed = c.seeds[0];
    let ds = load_behavior_log(&file)?;
    let model_cfg = c.model.model_config(
        c.variant,
        ds.vocab.items.table_size(),
        ds.vocab.categories.table_size(),
    );
    let splits = prepare_splits(&ds, &c.split, model_cfg.history_window(), seed)?;
    log::info!(
        "{}: {} events, {} training / {} validation / {} test examples",
        file.display(),
        ds.events.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    let outcome = run(&ds, &splits, &model_cfg, &c.train.train_config(seed), false)?;

    let echo = c.echo();
    let staged = Staged::new(out)?;
    checkpoint::save(
        &staged.path(CHECKPOINT_DIR),
        &outcome.model,
        &ds.vocab,
        &ds.clock,
        echo.clone(),
    )?;
    staged.write_json(
        METRICS_FILE,
        &MetricsFile {
            test: &outcome.test,
            validation: outcome.validation.as_ref(),
            epoch_losses: Some(&outcome.train.epoch_losses),
            config: echo.clone(),
        },
    )?;
    let losses = outcome
        .train
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, &loss)| LossRow { epoch: e + 1, loss });
    staged.write(LOSS_FILE, csv_bytes(&["epoch", "loss"], losses)?)?;
    staged.write_json(CONFIG_FILE, &echo)?;
    let out = staged.commit()?;
    println!(
        "{} seed {seed}: test auc {:.4} logloss {:.4} -> {}",
        c.variant,
        outcome.test.auc,
        outcome.test.logloss,
        out.display()
    );
    Ok(())
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub dump_gates: bool,
    pub dump_attention: bool,
    pub batch_size: Option<usize>,
}

#[derive(Serialize)]
struct GateRow {
    example_id: usize,
    alpha_mean: Option<f64>,
    recency_seconds: u64,
}

#[derive(Serialize)]
struct AttentionRow {
    example_id: usize,
    position: usize,
    a_c: Option<f64>,
    a_t: Option<f64>,
}

pub fn eval(r: &EvalRequest) -> Result<()> {
    let ck = checkpoint::load(&r.checkpoint)
        .with_context(|| format!("loading checkpoint {}", r.checkpoint.display()))?;
    let run_cfg: RunConfig = serde_json::from_value(ck.run_config.clone()).unwrap_or_else(|e| {
        log::warn!("checkpoint carries no usable run config ({e}); using defaults");
        RunConfig::default()
    });
    let file = if r.data.is_dir() {
        r.data.join(EVENTS_FILE)
    } else {
        r.data.clone()
    };
    if !file.is_file() {
        return Err(usage(format!("dataset not found: {}", file.display())));
    }
    let (records, _) = read_records(&file)?;
    let ds = Dataset::with_frozen(&records, &ck.vocab, ck.clock);
    let seed = run_cfg.seeds.first().copied().unwrap_or(0);
    let model = &ck.model;
    let splits = prepare_splits(&ds, &run_cfg.split, model.config.history_window(), seed)?;
    let examples = model.encode_all(&splits.test, &ds.clock)?;
    let batch = r.batch_size.unwrap_or(run_cfg.train.batch_size);
    let traced = r.dump_gates || r.dump_attention;
    let report = evaluate(model, &examples, batch, traced)?;

    let staged = Staged::new(&r.out)?;
    staged.write_json(
        METRICS_FILE,
        &MetricsFile {
            test: &report,
            validation: None,
            epoch_losses: None,
            config: json!({
                "checkpoint": r.checkpoint,
                "data": r.data,
                "model": model.config,
                "run": ck.run_config,
            }),
        },
    )?;
    if r.dump_gates {
        let rows = report.records.iter().map(|x| GateRow {
            example_id: x.example_id,
            alpha_mean: x.alpha_mean,
            recency_seconds: x.recency_seconds,
        });
        staged.write(
            GATES_FILE,
            csv_bytes(&["example_id", "alpha_mean", "recency_seconds"], rows)?,
        )?;
    }
    if r.dump_attention {
        let rows = report.records.iter().flat_map(|x| {
            let n = x.content_weights.len().max(x.temporal_weights.len());
            (0..n).map(move |k| AttentionRow {
                example_id: x.example_id,
                position: k,
                a_c: x.content_weights.get(k).copied(),
                a_t: x.temporal_weights.get(k).copied(),
            })
        });
        staged.write(
            ATTENTION_FILE,
            csv_bytes(&["example_id", "position", "a_c", "a_t"], rows)?,
        )?;
    }
    let out = staged.commit()?;
    println!(
        "test auc {:.4} logloss {:.4} over {} examples -> {}",
        report.auc,
        report.logloss,
        report.n_pos + report.n_neg,
        out.display()
    );
    Ok(())
}

pub fn gradcheck(cfg: &GradcheckConfig, out: Option<&Path>) -> Result<()> {
    let t = Instant::now();
    let report = run_gradcheck(cfg)?;
    for g in &report.groups {
        println!(
            "{:<26} rel_err {:.3e}  |grad| {:.3e}  {}",
            g.group,
            g.rel_error,
            g.analytic_norm,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{} groups in {:.2?}", report.groups.len(), t.elapsed());
    if let Some(out) = out {
        let staged = Staged::new(out)?;
        staged.write_json("gradcheck.json", &json!({"config": cfg, "report": report}))?;
        staged.commit()?;
    }
    let failed: Vec<&str> = report
        .groups
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.group.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRun {
    variant: Variant,
    seed: u64,
    auc: f64,
    logloss: f64,
}

#[derive(Debug, Serialize)]
struct AblationSummary {
    variant: Variant,
    mean_auc: f64,
    mean_logloss: f64,
    runs: usize,
}

pub fn ablate(c: &RunConfig, variants: &[Variant], out: &Path) -> Result<()> {
    let file = c.data_file()?;
    let ds = load_behavior_log(&file)?;
    let (n_items, n_categories) = (
        ds.vocab.items.table_size(),
        ds.vocab.categories.table_size(),
    );
    let configs: Vec<_> = variants
        .iter()
        .map(|&v| {
            let mc = c.model.model_config(v, n_items, n_categories);
            mc.validate()
                .map_err(|e| usage(format!("variant {v}: {e}")))?;
            Ok(mc)
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for mc in &configs {
        let t = Instant::now();
        let start = runs.len();
        for &seed in &c.seeds {
            let splits = prepare_splits(&ds, &c.split, mc.history_window(), seed)?;
            let o = run(&ds, &splits, mc, &c.train.train_config(seed), false)
                .with_context(|| format!("variant {} seed {seed}", mc.variant))?;
            log::info!("{} seed {seed}: auc {:.4}", mc.variant, o.test.auc);
            runs.push(AblationRun {
                variant: mc.variant,
                seed,
                auc: o.test.auc,
                logloss: o.test.logloss,
            });
        }
        let mine = &runs[start..];
        let n = mine.len() as f64;
        let s = AblationSummary {
            variant: mc.variant,
            mean_auc: mine.iter().map(|r| r.auc).sum::<f64>() / n,
            mean_logloss: mine.iter().map(|r| r.logloss).sum::<f64>() / n,
            runs: mine.len(),
        };
        println!(
            "{:<11} auc {:.4}  logloss {:.4}  ({} seeds, {:.1?})",
            s.variant.name(),
            s.mean_auc,
            s.mean_logloss,
            s.runs,
            t.elapsed()
        );
        summary.push(s);
    }

    let staged = Staged::new(out)?;
    staged.write_json(
        "ablation.json",
        &json!({"summary": summary, "runs": runs, "config": c.echo()}),
    )?;
    staged.write(
        "ablation.csv",
        csv_bytes(&["variant", "mean_auc", "mean_logloss", "runs"], &summary)?,
    )?;
    staged.write(
        "runs.csv",
        csv_bytes(&["variant", "seed", "auc", "logloss"], &runs)?,
    )?;
    staged.commit()?;
    Ok(())
}
