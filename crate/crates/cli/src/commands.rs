use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use csa_core::analysis::{analyze_descriptors, StageDescriptors, EMA_FACTOR};
use csa_core::autodiff::Checkpoint;
use csa_core::data::{load_dataset, nearest_centroid_error, DataSplit, Dataset};
use csa_core::model::{build_model, Model, Variant};
use csa_core::selftest::{self, SuiteResult};
use csa_core::train::{evaluate, train, Metrics, RunReport};
use csa_core::CsaError;
use serde::Serialize;

use crate::config::{dataset_string, ConfigFile, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "ckpt";
pub const CONFIG_ECHO: &str = "config.toml";
/// Checkpoint meta key holding the run configuration as JSON.
pub const RUN_META: &str = "run";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CsaError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_data(run: &RunConfig) -> Result<DataSplit, CliError> {
    Ok(load_dataset(&run.dataset, run.limit)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

impl Timing {
    fn from_report(report: &RunReport, total_seconds: f64) -> Self {
        Timing {
            epoch_seconds: report.epoch_seconds.clone(),
            total_seconds,
        }
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            return 0.0;
        }
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
    }
}

fn save_checkpoint(model: &Model, run: &RunConfig, path: &Path) -> Result<(), CliError> {
    let mut ck = model.to_checkpoint()?;
    let echo = serde_json::to_string(&run.echo()).map_err(CsaError::from)?;
    ck.meta.push((RUN_META.into(), echo));
    ck.save(path)?;
    Ok(())
}

/// Trains one model and writes `metrics.json`, `timing.json`, the
/// checkpoint and the config echo into `out`.
pub fn train_run(run: &RunConfig, data: &DataSplit, out: &Path) -> Result<(Model, RunReport, Timing), CliError> {
    create_dir(out)?;
    let mut model = build_model(&run.model)?;
    let start = Instant::now();
    let report = train(&mut model, data, &run.train)?;
    let timing = Timing::from_report(&report, start.elapsed().as_secs_f64());
    write_json(&out.join("metrics.json"), &report.metrics)?;
    write_json(&out.join("timing.json"), &timing)?;
    save_checkpoint(&model, run, &out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(CONFIG_ECHO), &run.to_toml())?;
    Ok((model, report, timing))
}

fn print_metrics(label: &str, m: &Metrics) {
    match m.top5_error {
        Some(top5) => println!(
            "{label:<6} loss {:.4}  top-1 {:6.2}%  top-5 {:6.2}%  ({} samples)",
            m.loss,
            100.0 * m.top1_error,
            100.0 * top5,
            m.samples
        ),
        None => println!(
            "{label:<6} loss {:.4}  top-1 {:6.2}%  ({} samples)",
            m.loss,
            100.0 * m.top1_error,
            m.samples
        ),
    }
}

pub fn cmd_train(run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = load_data(run)?;
    println!(
        "training {} on {} ({} train / {} test), {} epochs",
        run.model.variant,
        dataset_string(&run.dataset),
        data.train.len(),
        data.test.len(),
        run.train.epochs
    );
    let (model, report, timing) = train_run(run, &data, out)?;
    println!("parameters {} (attention {})", model.param_count(), model.attention_param_count());
    for e in &report.metrics.epochs {
        println!(
            "epoch {:>3}  lr {:.5}  train loss {:.4}  train err {:6.2}%  test err {:6.2}%",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            100.0 * e.train_error,
            100.0 * e.test_error
        );
    }
    print_metrics("train", &report.metrics.final_train);
    print_metrics("test", &report.metrics.final_test);
    println!("mean epoch time {:.2}s", timing.mean_epoch_seconds());
    println!("wrote {}", out.display());
    Ok(())
}

/// `--checkpoint` may name the file itself or a training output directory.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a checkpoint and the configuration layer recorded with it.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ConfigFile), CliError> {
    let path = checkpoint_path(path);
    let ck = Checkpoint::load(&path).map_err(|e| match e {
        CsaError::Io(io) => CliError::io(&path, io),
        other => other.into(),
    })?;
    let model = Model::from_checkpoint(&ck)?;
    let recorded = match ck.meta(RUN_META) {
        Some(json) => serde_json::from_str(json).map_err(CsaError::from)?,
        None => ConfigFile::default(),
    };
    Ok((model, recorded))
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<(), CliError> {
    let shape = data.image_shape();
    if shape[0] != model.spec.in_channels || data.num_classes != model.spec.num_classes {
        return Err(CliError::Invalid(format!(
            "checkpoint expects {} input channel(s) and {} classes, dataset has {} and {}",
            model.spec.in_channels, model.spec.num_classes, shape[0], data.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub dataset: String,
    pub train: Metrics,
    pub test: Metrics,
}

pub fn cmd_eval(model: &Model, run: &RunConfig, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let data = load_data(run)?;
    check_compatible(model, &data.test)?;
    let report = EvalReport {
        variant: model.spec.variant,
        dataset: dataset_string(&run.dataset),
        train: evaluate(model, &data.train)?,
        test: evaluate(model, &data.test)?,
    };
    print_metrics("train", &report.train);
    print_metrics("test", &report.test);
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(report)
}

pub fn descriptor_file(stage: usize) -> String {
    format!("descriptors_stage{stage}.csv")
}

fn write_descriptors(stages: &[StageDescriptors], out: &Path) -> Result<(), CliError> {
    for s in stages {
        write_text(&out.join(descriptor_file(s.stage)), &s.to_csv())?;
    }
    Ok(())
}

/// Whether the last stage has smaller mean |q| than the middle one.
pub fn late_stage_flattening(stages: &[StageDescriptors]) -> Option<bool> {
    if stages.len() < 2 {
        return None;
    }
    let mid = stages[(stages.len() - 1) / 2].mean_abs_q_raw;
    Some(stages[stages.len() - 1].mean_abs_q_raw < mid)
}

pub fn cmd_analyze(model: &Model, run: &RunConfig, smoothing: Option<f64>, out: &Path) -> Result<Vec<StageDescriptors>, CliError> {
    let data = load_data(run)?;
    check_compatible(model, &data.test)?;
    let stages = analyze_descriptors(model, &data.test, smoothing)?;
    create_dir(out)?;
    write_descriptors(&stages, out)?;
    write_text(&out.join(CONFIG_ECHO), &run.to_toml())?;
    for s in &stages {
        println!(
            "stage {}  channels {:>3}  mean |q| {:.4}  -> {}",
            s.stage,
            s.rows.len(),
            s.mean_abs_q_raw,
            descriptor_file(s.stage)
        );
    }
    if let Some(flat) = late_stage_flattening(&stages) {
        println!("last stage flatter than middle stage: {}", if flat { "yes" } else { "no" });
    }
    Ok(stages)
}

pub fn print_suites(results: &[SuiteResult]) {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in results {
        println!(
            "{} {:<width$}  {:.3e} (threshold {:.1e})  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.threshold,
            r.detail
        );
    }
}

fn finish_suites(results: &[SuiteResult], out: Option<&Path>, file: &str) -> Result<(), CliError> {
    print_suites(results);
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join(file), &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    finish_suites(&selftest::gradient_suite(seed), out, "gradcheck.json")
}

pub fn cmd_selftest(seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    finish_suites(&selftest::run_all(seed), out, "selftest.json")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub param_count: usize,
    pub attention_param_count: usize,
    pub final_train: Metrics,
    pub final_test: Metrics,
    /// Mean |q| per stage over the class-averaged test descriptors.
    pub mean_abs_q: Vec<f64>,
    pub late_stage_flattening: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub dataset: String,
    pub nearest_centroid_error: f64,
    pub variants: Vec<VariantResult>,
    /// Variants sharing the lowest test top-1 error.
    pub winners: Vec<Variant>,
}

impl Comparison {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Trains every variant on the same data and seed. Each variant writes
/// into `out/<variant>`; `comparison.json` holds the deterministic summary
/// and `timing.json` the wall-clock figures.
pub fn compare_variants(run: &RunConfig, out: &Path) -> Result<(Comparison, Vec<Timing>), CliError> {
    let data = load_data(run)?;
    create_dir(out)?;
    let nc = nearest_centroid_error(&data.train, &data.test)?;
    let mut variants = Vec::new();
    let mut timings = Vec::new();
    for variant in Variant::ALL {
        let mut v_run = run.clone();
        v_run.model.variant = variant;
        let dir = out.join(variant.as_str());
        let (model, report, timing) = train_run(&v_run, &data, &dir)?;
        let stages = analyze_descriptors(&model, &data.test, Some(EMA_FACTOR))?;
        write_descriptors(&stages, &dir)?;
        variants.push(VariantResult {
            variant,
            param_count: model.param_count(),
            attention_param_count: model.attention_param_count(),
            final_train: report.metrics.final_train,
            final_test: report.metrics.final_test,
            mean_abs_q: stages.iter().map(|s| s.mean_abs_q_raw).collect(),
            late_stage_flattening: late_stage_flattening(&stages),
        });
        timings.push(timing);
    }
    let best = variants
        .iter()
        .map(|v| v.final_test.top1_error)
        .fold(f64::INFINITY, f64::min);
    let winners = variants
        .iter()
        .filter(|v| v.final_test.top1_error == best)
        .map(|v| v.variant)
        .collect();
    let comparison = Comparison {
        dataset: dataset_string(&run.dataset),
        nearest_centroid_error: nc,
        variants,
        winners,
    };
    write_json(&out.join("comparison.json"), &comparison)?;
    #[derive(Serialize)]
    struct Entry<'a> {
        variant: Variant,
        #[serde(flatten)]
        timing: &'a Timing,
    }
    let entries: Vec<Entry> = comparison
        .variants
        .iter()
        .zip(&timings)
        .map(|(v, timing)| Entry { variant: v.variant, timing })
        .collect();
    write_json(&out.join("timing.json"), &entries)?;
    write_text(&out.join(CONFIG_ECHO), &run.to_toml())?;
    Ok((comparison, timings))
}

pub fn cmd_compare(run: &RunConfig, out: &Path) -> Result<(), CliError> {
    println!(
        "comparing {} on {}, {} epochs each",
        Variant::ALL.map(|v| v.as_str()).join(", "),
        dataset_string(&run.dataset),
        run.train.epochs
    );
    let (cmp, timings) = compare_variants(run, out)?;
    println!(
        "{:<9} {:>8} {:>9} {:>10} {:>10} {:>9}  mean |q| per stage",
        "variant", "params", "attn", "train err", "test err", "s/epoch"
    );
    for (v, t) in cmp.variants.iter().zip(&timings) {
        let q: Vec<String> = v.mean_abs_q.iter().map(|x| format!("{x:.3}")).collect();
        println!(
            "{:<9} {:>8} {:>9} {:>9.2}% {:>9.2}% {:>9.2}  {}",
            v.variant.as_str(),
            v.param_count,
            v.attention_param_count,
            100.0 * v.final_train.top1_error,
            100.0 * v.final_test.top1_error,
            t.mean_epoch_seconds(),
            q.join(" ")
        );
    }
    println!("nearest-centroid test error {:.2}%", 100.0 * cmp.nearest_centroid_error);
    let names: Vec<&str> = cmp.winners.iter().map(|v| v.as_str()).collect();
    println!("lowest test error: {}", names.join(", "));
    println!("wrote {}", out.display());
    Ok(())
}
