//! Experiment configuration: a strict TOML schema (unknown keys rejected)
//! resolved into runtime types, plus the canonical config hash.

use crate::data::DataSource;
use crate::energy::{EnergyConstants, EnergyMode};
use crate::error::{Error, Result};
use crate::lora::{AdapterPlan, LayerSelector};
use crate::model::{Activation, SurrogatePath};
use crate::quant::{Granularity, QuantFormat, QuantKind};
use crate::rng::substream;
use crate::train::{Hyper, OptimizerKind};
use crate::variability::{PerturbScope, PerturbSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

/// Derive a stage seed from the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    substream(root, label).random()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage draws from a named substream of it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<AdapterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSection>,
    /// Adapter retraining hyperparameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperSection>,
    /// Pretraining hyperparameters (defaults to `hyper` defaults).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<HyperSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic_blobs", "idx_dir" or "csv".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Layer widths, input first, classes last (e.g. [784, 128, 10]).
    pub layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    /// Skip pretraining and load this checkpoint instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// "fp64" (default) or "bfp:M" for the adapter datapath.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_datapath: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub literal_sum: Option<bool>,
}

/// Adapter placement: a selector name or an explicit index list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Name(String),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    /// "all_linear" (default), "last:K", or a list of layer indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<LayerSelection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    /// "all", "sensitivity" or "random".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    /// "constants" (default) or "fraction=F".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_cim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_fp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops_per_mac: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_cim_scale: Option<f64>,
}

/// Selection strategy after resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectionKind {
    All,
    Sensitivity { k_per_class: usize },
    Random { k_per_class: usize, seed: u64 },
}

impl SelectionKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionKind::All => "all",
            SelectionKind::Sensitivity { .. } => "sensitivity",
            SelectionKind::Random { .. } => "random",
        }
    }
}

/// Fully resolved runtime plan for one experiment.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source: DataSource,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub checkpoint: Option<PathBuf>,
    pub surrogate: SurrogatePath,
    pub quant: Option<QuantFormat>,
    pub perturb: Option<PerturbSpec>,
    pub adapters: Option<AdapterPlan>,
    pub selection: SelectionKind,
    pub hyper: Hyper,
    pub pretrain: Hyper,
    pub energy_constants: EnergyConstants,
    pub energy_mode: EnergyMode,
}

impl ExperimentConfig {
    /// Parse TOML, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// A copy with every defaulted field made explicit; the hash input.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.dataset.kind == "synthetic_blobs" && c.dataset.seed.is_none() {
            c.dataset.seed = Some(derive_seed(c.seed, "dataset"));
        }
        if let Some(p) = &mut c.perturb {
            if p.seed.is_none() {
                p.seed = Some(derive_seed(self.seed, "perturb"));
            }
            if p.literal_sum.is_none() {
                p.literal_sum = Some(false);
            }
        }
        if let Some(s) = &mut c.selection {
            if s.kind == "random" && s.seed.is_none() {
                s.seed = Some(derive_seed(self.seed, "selection"));
            }
        }
        Ok(c)
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(&self.resolved()?)
            .map_err(|e| Error::Config(format!("config hash: {e}")))?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }

    fn resolve_hyper(section: Option<&HyperSection>, seed: u64) -> Result<Hyper> {
        let mut h = Hyper {
            seed,
            ..Hyper::default()
        };
        if let Some(s) = section {
            if let Some(lr) = s.lr {
                h.lr = lr;
            }
            if let Some(e) = s.epochs {
                h.epochs = e;
            }
            if let Some(b) = s.batch_size {
                h.batch_size = b;
            }
            if let Some(o) = &s.optimizer {
                h.optimizer = OptimizerKind::parse(o)?;
            }
            if let Some(m) = s.momentum {
                h.momentum = m;
            }
        }
        h.validate()?;
        Ok(h)
    }

    /// Validate and resolve into a runtime plan.
    pub fn plan(&self) -> Result<RunPlan> {
        let resolved = self.resolved()?;
        let d = &resolved.dataset;
        let source = match d.kind.as_str() {
            "synthetic_blobs" => {
                let need = |v: Option<usize>, what: &str| {
                    v.ok_or_else(|| {
                        Error::Config(format!("dataset.{what} is required for synthetic_blobs"))
                    })
                };
                DataSource::SyntheticBlobs {
                    classes: need(d.classes, "classes")?,
                    dim: need(d.dim, "dim")?,
                    n: need(d.n, "n")?,
                    seed: d.seed.expect("resolved"),
                }
            }
            "idx_dir" | "csv" => {
                let path = d
                    .path
                    .clone()
                    .ok_or_else(|| Error::Config("dataset.path is required".into()))?;
                if d.kind == "idx_dir" {
                    DataSource::IdxDir(path)
                } else {
                    DataSource::Csv(path)
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind must be synthetic_blobs, idx_dir or csv, got {other:?}"
                )))
            }
        };
        if resolved.model.layers.len() < 2 {
            return Err(Error::Config(
                "model.layers needs at least input and output widths".into(),
            ));
        }
        let activation = match &resolved.model.activation {
            Some(a) => Activation::parse(a)?,
            None => Activation::Relu,
        };
        let surrogate = match &resolved.model.surrogate_datapath {
            Some(s) => SurrogatePath::parse(s)?,
            None => SurrogatePath::Fp64,
        };
        let quant = match &resolved.quant {
            Some(q) => {
                let granularity = match &q.granularity {
                    Some(g) => Granularity::parse(g)?,
                    None => Granularity::PerTensor,
                };
                Some(QuantFormat::new(
                    QuantKind::parse(&q.kind)?,
                    granularity,
                    q.activation_bits,
                )?)
            }
            None => None,
        };
        let perturb = match &resolved.perturb {
            Some(p) => Some(PerturbSpec {
                sigma: p.sigma,
                seed: p.seed.expect("resolved"),
                scope: match &p.layers {
                    Some(ixs) => PerturbScope::Layers(ixs.clone()),
                    None => PerturbScope::AllLayers,
                },
                literal_sum: p.literal_sum.unwrap_or(false),
            }),
            None => None,
        };
        let adapters = match &resolved.adapters {
            Some(a) => {
                let selector = match &a.layers {
                    None => LayerSelector::AllLinear,
                    Some(LayerSelection::List(ixs)) => LayerSelector::Listed(ixs.clone()),
                    Some(LayerSelection::Name(name)) => {
                        if name == "all_linear" {
                            LayerSelector::AllLinear
                        } else if let Some(k) = name.strip_prefix("last:") {
                            let k = k.parse().map_err(|_| {
                                Error::Config(format!("bad adapter layer selector {name:?}"))
                            })?;
                            LayerSelector::LastK(k)
                        } else {
                            return Err(Error::Config(format!(
                                "adapter layers must be all_linear, last:K or an index list, got {name:?}"
                            )));
                        }
                    }
                };
                Some(AdapterPlan::new(a.rank, selector))
            }
            None => None,
        };
        let selection = match &resolved.selection {
            None => SelectionKind::All,
            Some(s) => match s.kind.as_str() {
                "all" => SelectionKind::All,
                "sensitivity" => SelectionKind::Sensitivity {
                    k_per_class: s.k_per_class.ok_or_else(|| {
                        Error::Config("selection.k_per_class is required for sensitivity".into())
                    })?,
                },
                "random" => SelectionKind::Random {
                    k_per_class: s.k_per_class.ok_or_else(|| {
                        Error::Config("selection.k_per_class is required for random".into())
                    })?,
                    seed: s.seed.expect("resolved"),
                },
                other => {
                    return Err(Error::Config(format!(
                        "selection.kind must be all, sensitivity or random, got {other:?}"
                    )))
                }
            },
        };
        let hyper = Self::resolve_hyper(resolved.hyper.as_ref(), derive_seed(resolved.seed, "retrain"))?;
        let pretrain =
            Self::resolve_hyper(resolved.pretrain.as_ref(), derive_seed(resolved.seed, "pretrain"))?;
        let (energy_constants, energy_mode) = match &resolved.energy {
            None => (EnergyConstants::default(), EnergyMode::FromConstants),
            Some(e) => {
                let mut consts = EnergyConstants::default();
                if let Some(v) = e.e_cim {
                    consts.e_cim = v;
                }
                if let Some(v) = e.e_fp {
                    consts.e_fp = v;
                }
                if let Some(v) = e.ops_per_mac {
                    consts.ops_per_mac = v;
                }
                if let Some(v) = e.e_cim_scale {
                    consts.e_cim_scale = v;
                }
                consts.validate().map_err(|e| match e {
                    Error::Argument(m) => Error::Config(m),
                    other => other,
                })?;
                let mode = match &e.mode {
                    None => EnergyMode::FromConstants,
                    Some(m) => EnergyMode::parse(m).map_err(|e| match e {
                        Error::Argument(m) => Error::Config(m),
                        other => other,
                    })?,
                };
                (consts, mode)
            }
        };
        Ok(RunPlan {
            seed: resolved.seed,
            out_dir: resolved.out_dir.clone(),
            source,
            widths: resolved.model.layers.clone(),
            activation,
            checkpoint: resolved.model.checkpoint.clone(),
            surrogate,
            quant,
            perturb,
            adapters,
            selection,
            hyper,
            pretrain,
            energy_constants,
            energy_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
out_dir = "runs/x"

[dataset]
kind = "synthetic_blobs"
classes = 4
dim = 16
n = 100

[model]
layers = [16, 8, 4]
"#;

    #[test]
    fn minimal_config_parses_and_plans() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.widths, vec![16, 8, 4]);
        assert_eq!(plan.selection, SelectionKind::All);
        assert!(plan.quant.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\nnot_a_key = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
        let bad_section = MINIMAL.replace("[model]", "[model]\ntypo_key = 3");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad_section),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), a.hash().unwrap());
    }

    #[test]
    fn adapter_layer_selectors_parse() {
        for (text, want) in [
            ("layers = \"all_linear\"", LayerSelector::AllLinear),
            ("layers = \"last:1\"", LayerSelector::LastK(1)),
            ("layers = [0, 1]", LayerSelector::Listed(vec![0, 1])),
        ] {
            let toml = format!("{MINIMAL}\n[adapters]\nrank = 2\n{text}\n");
            let cfg = ExperimentConfig::from_toml(&toml).unwrap();
            let plan = cfg.plan().unwrap();
            assert_eq!(plan.adapters.unwrap().selector, want);
        }
    }

    #[test]
    fn derived_seeds_are_stable() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let p1 = cfg.plan().unwrap();
        let p2 = cfg.plan().unwrap();
        assert_eq!(p1.hyper.seed, p2.hyper.seed);
        assert_eq!(p1.pretrain.seed, p2.pretrain.seed);
        assert_ne!(p1.hyper.seed, p1.pretrain.seed);
    }
}
