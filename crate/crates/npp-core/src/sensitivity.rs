//! Gradient-magnitude sample ranking: score each candidate retraining sample
//! by the sum of absolute loss gradients over all base parameters, then keep
//! a per-class budget of the most sensitive ones.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, Batch, DenseModel};
use crate::pool;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Sensitivity of one sample: sum of |dL/dw| over every base parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub sample_id: u64,
    pub class_label: usize,
    pub score: f64,
}

/// Score a single sample. The loss is the sample's own cross-entropy (batch
/// of one), gradients are taken over all base weights and biases regardless
/// of frozen flags, and adapters are excluded.
pub fn sensitivity_score(model: &DenseModel, input: &[f64], label: usize) -> Result<f64> {
    let batch = Batch::new(
        Tensor::from_rows(1, input.len(), input.to_vec())?,
        vec![label],
        vec![0],
    )?;
    let (loss, grads) = loss_and_grads(model, &batch, model.natural_mode())?;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss while scoring".into()));
    }
    let mut score = 0.0;
    for lg in &grads.layers {
        score += lg.weight.data().iter().map(|g| g.abs()).sum::<f64>();
        score += lg.bias.data().iter().map(|g| g.abs()).sum::<f64>();
    }
    if !score.is_finite() {
        return Err(Error::Numeric("non-finite sensitivity score".into()));
    }
    Ok(score)
}

/// Score every sample of a split, in split order. Scoring a sample inside a
/// batch equals scoring it alone because each sample is scored as its own
/// batch of one.
pub fn score_split(model: &DenseModel, split: &Split) -> Result<Vec<SampleScore>> {
    if split.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    pool::install(|| {
        (0..split.len())
            .into_par_iter()
            .map(|i| {
                let score = sensitivity_score(model, split.inputs.row(i), split.labels[i])?;
                Ok(SampleScore {
                    sample_id: split.ids[i],
                    class_label: split.labels[i],
                    score,
                })
            })
            .collect()
    })
}

/// Result of per-class selection: globally ordered by descending score with
/// ties broken by ascending sample id.
#[derive(Debug, Clone)]
pub struct Selection {
    pub ranked: Vec<SampleScore>,
    /// One entry per class that had fewer than `k_per_class` samples.
    pub warnings: Vec<String>,
    /// Scores of the full split, in split order (for score emission).
    pub all_scores: Vec<SampleScore>,
}

fn by_score_desc(a: &SampleScore, b: &SampleScore) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then(a.sample_id.cmp(&b.sample_id))
}

/// Keep the `k_per_class` highest-score samples of every class (or the whole
/// class, with a warning, when it has fewer).
pub fn rank_and_select(model: &DenseModel, split: &Split, k_per_class: usize) -> Result<Selection> {
    if k_per_class == 0 {
        return Err(Error::Argument("k_per_class must be positive".into()));
    }
    let all_scores = score_split(model, split)?;
    let mut per_class: BTreeMap<usize, Vec<SampleScore>> = BTreeMap::new();
    for s in &all_scores {
        per_class.entry(s.class_label).or_default().push(s.clone());
    }
    let mut warnings = Vec::new();
    let mut ranked = Vec::new();
    for (class, mut scores) in per_class {
        scores.sort_by(by_score_desc);
        if scores.len() < k_per_class {
            warnings.push(format!(
                "class {class} has only {} samples (budget {k_per_class}); taking all",
                scores.len()
            ));
        }
        ranked.extend(scores.into_iter().take(k_per_class));
    }
    ranked.sort_by(by_score_desc);
    Ok(Selection {
        ranked,
        warnings,
        all_scores,
    })
}

/// Emit scores as CSV: `sample_id,class,score` with 17 significant digits.
pub fn write_scores_csv(path: &Path, scores: &[SampleScore]) -> Result<()> {
    let mut out = String::from("sample_id,class,score\n");
    for s in scores {
        out.push_str(&format!("{},{},{:.16e}\n", s.sample_id, s.class_label, s.score));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// The CSV body as a string (identical bytes to `write_scores_csv`).
pub fn scores_csv_string(scores: &[SampleScore]) -> String {
    let mut out = String::from("sample_id,class,score\n");
    for s in scores {
        out.push_str(&format!("{},{},{:.16e}\n", s.sample_id, s.class_label, s.score));
    }
    out
}
