//! Reproducible experiment driver: pretrain (or load), degrade
//! (quantize/perturb), attach correction paths, select retraining samples,
//! retrain, evaluate, and account energy. All stage randomness derives from
//! the root seed, and `report.csv` is byte-identical across reruns of the
//! same config.

pub mod config;

pub use config::{ExperimentConfig, RunPlan, SelectionKind};

use crate::checkpoint;
use crate::data::{load_dataset, Dataset, Split};
use crate::energy::{network_energy, NetworkLedger};
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, train_adapters, train_adapters_on_split, trainable_fraction};
use crate::model::DenseModel;
use crate::quant::fake_quantize_model;
use crate::rng::substream;
use crate::sensitivity::{rank_and_select, scores_csv_string};
use crate::train::{evaluate, train};
use crate::variability::perturb_weights;
use rand::seq::SliceRandom;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Everything a finished run reports. `wall_time_s` is informational only
/// and deliberately excluded from `report.csv` so reruns are byte-identical.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub baseline_acc: f64,
    pub degraded_acc: f64,
    pub recovered_acc: f64,
    pub trainable_fraction: f64,
    pub energy: NetworkLedger,
    pub wall_time_s: f64,
    pub report_csv: String,
    pub scores_csv: Option<String>,
    /// Ids of the retraining samples, in selection order.
    pub selected_ids: Vec<u64>,
    pub warnings: Vec<String>,
}

fn tag_stage(name: &str, e: Error) -> Error {
    let msg = format!("stage {name}: {e}");
    match e {
        Error::Config(_) => Error::Config(msg),
        Error::Argument(_) => Error::Argument(msg),
        Error::Format(_) => Error::Format(msg),
        Error::Integrity(_) => Error::Integrity(msg),
        Error::Numeric(_) => Error::Numeric(msg),
        Error::UnsupportedFormat(_) => Error::UnsupportedFormat(msg),
        Error::LayerDimension { .. } | Error::Dimension(_) => Error::Dimension(msg),
        Error::Io(_) => Error::Format(msg),
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| tag_stage(name, e))
}

fn uniform_per_class(split: &Split, k_per_class: usize, seed: u64, classes: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    for class in 0..classes {
        let mut idxs: Vec<usize> = (0..split.len())
            .filter(|&i| split.labels[i] == class)
            .collect();
        let mut rng = substream(seed, &format!("selection.class{class}"));
        idxs.shuffle(&mut rng);
        picked.extend(idxs.into_iter().take(k_per_class));
    }
    picked
}

struct PipelineOutcome {
    model: DenseModel,
    baseline_acc: f64,
    degraded_acc: f64,
    recovered_acc: f64,
    trainable_fraction: f64,
    energy: NetworkLedger,
    scores_csv: Option<String>,
    selected_ids: Vec<u64>,
    warnings: Vec<String>,
    data: Dataset,
}

fn run_pipeline(plan: &RunPlan) -> Result<PipelineOutcome> {
    let data = stage("load-dataset", load_dataset(&plan.source))?;

    // Pretraining emulates the cloud-trained float model.
    let mut model = match &plan.checkpoint {
        Some(path) => stage("load-checkpoint", checkpoint::load_model(path))?,
        None => {
            if plan.widths[0] != data.dim() {
                return Err(Error::Config(format!(
                    "model input width {} does not match dataset dim {}",
                    plan.widths[0],
                    data.dim()
                )));
            }
            if *plan.widths.last().expect("validated") != data.num_classes {
                return Err(Error::Config(format!(
                    "model output width {} does not match class count {}",
                    plan.widths.last().expect("validated"),
                    data.num_classes
                )));
            }
            let mut m = stage(
                "pretrain",
                DenseModel::new(&plan.widths, plan.activation, config::derive_seed(plan.seed, "init")),
            )?;
            stage("pretrain", train(&mut m, &data, &plan.pretrain))?;
            m
        }
    };
    model.surrogate_path = plan.surrogate;
    let baseline_acc = stage("evaluate-baseline", evaluate(&model, &data.test, model.natural_mode()))?;

    // Degradation: quantize to the edge format, then inject variability into
    // the deployed weights.
    if let Some(format) = &plan.quant {
        model = stage("quantize", Ok(fake_quantize_model(&model, format)))?;
    }
    if let Some(spec) = &plan.perturb {
        model = stage("perturb", perturb_weights(&model, spec))?;
    }
    let degraded_acc = stage("evaluate-degraded", evaluate(&model, &data.test, model.natural_mode()))?;

    let mut warnings = Vec::new();
    let mut scores_csv = None;
    let mut selected_ids = Vec::new();
    let mut recovered_acc = degraded_acc;
    let mut fraction = 0.0;

    if let Some(adapter_plan) = &plan.adapters {
        model = stage(
            "adapt",
            attach_adapters(&model, adapter_plan, config::derive_seed(plan.seed, "adapter-init")),
        )?;
        fraction = trainable_fraction(&model);

        let subset = match &plan.selection {
            SelectionKind::All => None,
            SelectionKind::Sensitivity { k_per_class } => {
                let selection = stage("select", rank_and_select(&model, &data.train, *k_per_class))?;
                warnings.extend(selection.warnings.clone());
                scores_csv = Some(scores_csv_string(&selection.all_scores));
                let idxs: Vec<usize> = selection
                    .ranked
                    .iter()
                    .map(|s| {
                        data.train.index_of_id(s.sample_id).ok_or_else(|| {
                            Error::Integrity(format!("selected id {} not in split", s.sample_id))
                        })
                    })
                    .collect::<Result<_>>()?;
                selected_ids = selection.ranked.iter().map(|s| s.sample_id).collect();
                Some(stage("select", data.train.subset(&idxs))?)
            }
            SelectionKind::Random { k_per_class, seed } => {
                let idxs = uniform_per_class(&data.train, *k_per_class, *seed, data.num_classes);
                if idxs.is_empty() {
                    return Err(tag_stage("select", Error::Argument("no samples selected".into())));
                }
                let subset = stage("select", data.train.subset(&idxs))?;
                selected_ids = subset.ids.clone();
                Some(subset)
            }
        };

        match subset {
            None => {
                selected_ids = data.train.ids.clone();
                stage("retrain", train_adapters(&mut model, &data, &plan.hyper))?;
            }
            Some(subset) => {
                stage(
                    "retrain",
                    train_adapters_on_split(&mut model, &subset, &data, &plan.hyper),
                )?;
            }
        }
        recovered_acc = stage("evaluate-recovered", evaluate(&model, &data.test, model.natural_mode()))?;
    } else if !matches!(plan.selection, SelectionKind::All) {
        // No silent fallback: selecting samples without adapters to retrain
        // is a configuration mistake.
        return Err(Error::Config(
            "selection requires adapters to retrain".into(),
        ));
    }

    let energy = stage(
        "energy",
        network_energy(&model, None, &plan.energy_constants, plan.energy_mode),
    )?;

    Ok(PipelineOutcome {
        model,
        baseline_acc,
        degraded_acc,
        recovered_acc,
        trainable_fraction: fraction,
        energy,
        scores_csv,
        selected_ids,
        warnings,
        data,
    })
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn build_report_csv(cfg_hash: &str, plan: &RunPlan, out: &PipelineOutcome) -> String {
    let adapters = plan.adapters.as_ref();
    let mut s = String::from("stage,metric,value\n");
    let mut row = |stage: &str, metric: &str, value: String| {
        s.push_str(&format!("{stage},{metric},{value}\n"));
    };
    row("config", "hash", cfg_hash.to_string());
    row("config", "seed", plan.seed.to_string());
    row("dataset", "train_size", out.data.train.len().to_string());
    row("dataset", "test_size", out.data.test.len().to_string());
    row("dataset", "classes", out.data.num_classes.to_string());
    row("quant", "kind", fmt_opt(plan.quant.map(|q| q.kind.as_str())));
    row(
        "quant",
        "activation_bits",
        fmt_opt(plan.quant.and_then(|q| q.activation_bits)),
    );
    row(
        "perturb",
        "sigma",
        fmt_opt(plan.perturb.as_ref().map(|p| p.sigma)),
    );
    row("baseline", "accuracy", out.baseline_acc.to_string());
    row("degraded", "accuracy", out.degraded_acc.to_string());
    row(
        "adapters",
        "count",
        out.model
            .layers
            .iter()
            .filter(|l| l.adapter.is_some())
            .count()
            .to_string(),
    );
    row("adapters", "rank", fmt_opt(adapters.map(|a| a.rank)));
    row(
        "adapters",
        "trainable_fraction",
        out.trainable_fraction.to_string(),
    );
    row("selection", "kind", plan.selection.name().to_string());
    row("selection", "selected", out.selected_ids.len().to_string());
    row("recovered", "accuracy", out.recovered_acc.to_string());
    row("energy", "macs_main", out.energy.total.macs_main.to_string());
    row(
        "energy",
        "macs_surrogate",
        out.energy.total.macs_surrogate.to_string(),
    );
    row("energy", "energy_main_j", out.energy.total.energy_main.to_string());
    row(
        "energy",
        "energy_surrogate_j",
        out.energy.total.energy_surrogate.to_string(),
    );
    row(
        "energy",
        "tops_per_watt",
        out.energy.total.tops_per_watt.to_string(),
    );
    s
}

/// Write the run artifacts, removing everything written on a mid-way
/// failure so no partial outputs survive.
fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, bytes) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(Error::Io(e));
        }
        written.push(path);
    }
    Ok(())
}

/// Execute the full pipeline described by `config` and write `report.csv`,
/// `scores.csv` (for sensitivity selection) and `model.ckpt` into its
/// `out_dir`. Fully determined by (config, seed).
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let plan = config.plan()?;
    let cfg_hash = config.hash()?;
    let outcome = run_pipeline(&plan)?;
    let report_csv = build_report_csv(&cfg_hash, &plan, &outcome);

    let mut files: Vec<(String, Vec<u8>)> =
        vec![("report.csv".into(), report_csv.clone().into_bytes())];
    if let Some(scores) = &outcome.scores_csv {
        files.push(("scores.csv".into(), scores.clone().into_bytes()));
    }
    files.push((
        "model.ckpt".into(),
        checkpoint::model_to_bytes(&outcome.model)?,
    ));
    stage("write-outputs", write_outputs(&plan.out_dir, &files))?;

    Ok(RunReport {
        config_hash: cfg_hash,
        baseline_acc: outcome.baseline_acc,
        degraded_acc: outcome.degraded_acc,
        recovered_acc: outcome.recovered_acc,
        trainable_fraction: outcome.trainable_fraction,
        energy: outcome.energy,
        wall_time_s: start.elapsed().as_secs_f64(),
        report_csv,
        scores_csv: outcome.scores_csv,
        selected_ids: outcome.selected_ids,
        warnings: outcome.warnings,
    })
}

/// Render a report.csv file as an aligned table.
pub fn render_report(csv_text: &str) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    for line in csv_text.lines().skip(1) {
        let mut parts = line.splitn(3, ',');
        let stage = parts.next().unwrap_or_default();
        let metric = parts.next().unwrap_or_default();
        let value = parts.next().unwrap_or_default();
        rows.push((format!("{stage}.{metric}"), value.to_string()));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
seed = 11
out_dir = "{}"

[dataset]
kind = "synthetic_blobs"
classes = 3
dim = 12
n = 90

[model]
layers = [12, 8, 3]

[pretrain]
epochs = 8
"#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn noop_pipeline_keeps_accuracy_constant() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = blob_config(&tmp.path().join("run"));
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.baseline_acc, report.degraded_acc);
        assert_eq!(report.degraded_acc, report.recovered_acc);
        assert!(tmp.path().join("run/report.csv").exists());
        assert!(tmp.path().join("run/model.ckpt").exists());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = blob_config(&tmp.path().join("run"));
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.report_csv, b.report_csv);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn selection_without_adapters_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(tmp.path());
        cfg.selection = Some(super::config::SelectionSection {
            kind: "sensitivity".into(),
            k_per_class: Some(1),
            seed: None,
        });
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn render_report_aligns_rows() {
        let rendered = render_report("stage,metric,value\nconfig,seed,7\nbaseline,accuracy,0.5\n");
        assert!(rendered.contains("config.seed"));
        assert!(rendered.contains("baseline.accuracy"));
    }
}
