//! Run directories: what `train` writes and `generate` / `report` read.
//!
//! ```text
//! RUN/config.txt            effective training configuration
//! RUN/metadata.json         columns, scaling, class ratios
//! RUN/generator.json        final generator checkpoint
//! RUN/privacy_report.json   per-query costs, composed curve, final (ε, δ)
//! RUN/run_log.txt           one line per iteration
//! RUN/checkpoints/          periodic and abort checkpoints
//! RUN/tally.csv             vote histograms (only with tally dumping)
//! ```

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{MechanismKind, PrivacyReport};
use crate::data::{csv_header, load_csv, parse_csv, ColumnScale, Schema, TabularDataset};
use crate::error::{Error, Result};
use crate::eval::{eval_downstream, Classifier, EvalReport};
use crate::neural::{load_checkpoint, save_checkpoint, MlpParams};
use crate::training::{generate, train_with, IterationRecord, RunState, TrainConfig, TrainObserver, TrainResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const METADATA_FILE: &str = "metadata.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const REPORT_FILE: &str = "privacy_report.json";
pub const LOG_FILE: &str = "run_log.txt";
pub const TALLY_FILE: &str = "tally.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything needed to turn generator output back into records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub columns: Vec<String>,
    pub label_name: Option<String>,
    pub num_classes: usize,
    pub scaling: Option<Vec<ColumnScale>>,
    pub conditional: bool,
    pub class_ratios: Vec<f64>,
}

impl RunMetadata {
    pub fn schema(&self) -> Schema {
        Schema {
            columns: self.columns.clone(),
            label_name: self.label_name.clone(),
            num_classes: self.num_classes,
            scaling: self.scaling.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

struct RunWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    tally: Option<BufWriter<File>>,
    delta: f64,
}

impl RunWriter {
    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(name)
    }
}

impl TrainObserver for RunWriter {
    fn on_iteration(&mut self, state: &RunState, record: &IterationRecord<'_>, _g: &MlpParams) -> Result<()> {
        let m = state.metrics.last().expect("metrics recorded before the hook");
        writeln!(self.log, "{}", m.log_line())?;
        if m.iteration % 100 == 0 {
            log::info!("{}", m.log_line());
        }
        if let Some(out) = &mut self.tally {
            let first = state.metrics.len() == 1;
            for (j, agg) in record.aggregated.iter().enumerate() {
                if first && j == 0 {
                    let bins: Vec<String> = (0..agg.tally.bins()).map(|b| format!("bin_{b}")).collect();
                    writeln!(out, "iteration,record,dim,{}", bins.join(","))?;
                }
                for (dim, row) in agg.tally.rows().enumerate() {
                    let counts: Vec<String> = row.iter().map(u64::to_string).collect();
                    writeln!(out, "{},{j},{dim},{}", m.iteration, counts.join(","))?;
                }
            }
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, iteration: usize, generator: &MlpParams) -> Result<()> {
        self.log.flush()?;
        save_checkpoint(generator, &self.checkpoint_path(&format!("iter_{iteration}.json")))
    }

    fn on_abort(&mut self, state: &RunState, generator: &MlpParams, error: &Error) -> Result<()> {
        log::error!("training aborted at iteration {}: {error}", state.iteration + 1);
        self.log.flush()?;
        save_checkpoint(generator, &self.checkpoint_path("last_good.json"))?;
        write_json(&self.dir.join(REPORT_FILE), &state.ledger.report(self.delta)?)
    }
}

/// Label column to use: the requested one, or `label` when the file has it.
fn resolve_label(path: &Path, requested: Option<&str>) -> Result<Option<String>> {
    if let Some(name) = requested {
        return Ok(Some(name.to_string()));
    }
    Ok(csv_header(path)?.into_iter().find(|h| h == "label"))
}

/// Train from a CSV file into `out`.
pub fn train_run(
    config: &TrainConfig,
    data: &Path,
    label_column: Option<&str>,
    out: &Path,
    dump_tally: bool,
) -> Result<TrainResult> {
    config.validate()?;
    let label = resolve_label(data, label_column)?;
    if config.conditional && label.is_none() {
        return Err(Error::Input(
            "conditional training needs a label column (pass --label-column)".into(),
        ));
    }
    let dataset = load_csv(data, label.as_deref())?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    fs::write(out.join(CONFIG_FILE), config.to_config_string())?;
    let tally = if dump_tally {
        Some(BufWriter::new(File::create(out.join(TALLY_FILE))?))
    } else {
        None
    };
    let mut writer = RunWriter {
        dir: out.to_path_buf(),
        log: BufWriter::new(File::create(out.join(LOG_FILE))?),
        tally,
        delta: config.delta,
    };
    let result = train_with(config, &dataset, &mut writer)?;
    writer.log.flush()?;
    if let Some(t) = &mut writer.tally {
        t.flush()?;
    }
    let meta = RunMetadata {
        columns: dataset.columns().to_vec(),
        label_name: dataset.label_name().map(str::to_string),
        num_classes: dataset.num_classes(),
        scaling: dataset.scaling().map(<[ColumnScale]>::to_vec),
        conditional: config.conditional,
        class_ratios: result.state.class_ratios.clone(),
    };
    write_json(&out.join(METADATA_FILE), &meta)?;
    save_checkpoint(&result.generator, &out.join(GENERATOR_FILE))?;
    write_json(&out.join(REPORT_FILE), &result.report)?;
    Ok(result)
}

/// Sample `count` records from a trained run and write them as CSV in the
/// original feature scale. Returns the dataset that was written.
pub fn generate_run(run: &Path, count: usize, out: &Path, seed: u64) -> Result<TabularDataset> {
    let meta: RunMetadata = read_json(&run.join(METADATA_FILE))?;
    let generator = load_checkpoint(&run.join(GENERATOR_FILE))?;
    let ratios = meta.conditional.then_some(meta.class_ratios.as_slice());
    let batch = generate(&generator, count, ratios, seed)?;
    let mut schema = meta.schema();
    if batch.labels.is_some() && schema.label_name.is_none() {
        schema.label_name = Some("label".into());
    }
    let ds = TabularDataset::from_scaled(&schema, batch.features, batch.labels)?;
    ds.write_csv(out)?;
    Ok(ds)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Human-readable privacy summary of a run. A run without a privacy report
/// (nothing trained yet) reports ε = 0 at the configured δ.
pub fn report_run(run: &Path) -> Result<String> {
    let report_path = run.join(REPORT_FILE);
    let report: Option<PrivacyReport> = if report_path.exists() {
        Some(read_json(&report_path)?)
    } else {
        None
    };
    let mut s = String::new();
    match &report {
        Some(r) => {
            let eps = r.final_.epsilon.map_or_else(|| "inf".to_string(), |e| e.to_string());
            let _ = writeln!(s, "epsilon = {eps}");
            let _ = writeln!(s, "delta = {}", r.final_.delta);
            let _ = writeln!(s, "witness_order = {}", fmt_opt(r.final_.witness_order));
            let _ = writeln!(s, "laplace_extra = {}", r.final_.laplace_extra);
            let _ = writeln!(s, "queries = {}", r.queries.len());
            let _ = writeln!(s, "id\tkind\tsigma\tlambda\tepsilon_rdp");
            for q in &r.queries {
                let kind = match q.kind {
                    MechanismKind::GaussianThreshold => "gaussian-threshold",
                    MechanismKind::GnmaxDataDependent => "gnmax-data-dependent",
                    MechanismKind::Laplace => "laplace",
                };
                let _ = writeln!(
                    s,
                    "{}\t{kind}\t{}\t{}\t{}",
                    q.id,
                    fmt_opt(q.sigma),
                    fmt_opt(q.lambda),
                    fmt_opt(q.epsilon_rdp)
                );
            }
        }
        None => {
            let config_path = run.join(CONFIG_FILE);
            let text = fs::read_to_string(&config_path)
                .map_err(|e| Error::Input(format!("{} is not a run directory: {e}", run.display())))?;
            let config = TrainConfig::parse(&text)?;
            let _ = writeln!(s, "epsilon = 0");
            let _ = writeln!(s, "delta = {}", config.delta);
            let _ = writeln!(s, "queries = 0");
        }
    }
    Ok(s)
}

/// Train-on-synthetic, test-on-real evaluation of two CSV files.
pub fn eval_files(synthetic: &Path, real: &Path, label_column: Option<&str>, seed: u64) -> Result<EvalReport> {
    let label = resolve_label(real, label_column)?
        .ok_or_else(|| Error::Input("evaluation needs a label column (pass --label-column)".into()))?;
    let open = |p: &Path| -> Result<TabularDataset> { parse_csv(File::open(p)?, Some(&label)) };
    eval_downstream(&open(synthetic)?, &open(real)?, Classifier::LogisticRegression, seed)
}
