//! High-precision low-rank correction paths.
//!
//! A pair of factors A (D x r) and B (r x H) rides alongside a frozen linear
//! weight; the effective weight is W + A*B. Only the factors train. B starts
//! at zero so attaching is accuracy-neutral, and the factors stay in full
//! precision even when the base is fake-quantized.

use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::rng::substream;
use crate::tensor::{matmul_into, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Rank-r factor pair attached to one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    /// D x r input factor.
    pub a: Tensor,
    /// r x H output factor.
    pub b: Tensor,
}

impl AdapterPair {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if !a.is_2d() || !b.is_2d() || a.cols() != b.rows() {
            return Err(Error::Dimension(format!(
                "adapter factors {:?} and {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn param_count(&self) -> u64 {
        (self.a.numel() + self.b.numel()) as u64
    }
}

/// Which layers receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    AllLinear,
    LastK(usize),
    Listed(Vec<usize>),
}

/// Rank and placement of the correction paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterPlan {
    pub rank: usize,
    pub selector: LayerSelector,
}

impl AdapterPlan {
    pub fn new(rank: usize, selector: LayerSelector) -> Self {
        Self { rank, selector }
    }

    /// Indices of the selected layers, validated against the model.
    pub fn selected_layers(&self, model: &DenseModel) -> Result<Vec<usize>> {
        let n = model.layers.len();
        let picked: Vec<usize> = match &self.selector {
            LayerSelector::AllLinear => (0..n).collect(),
            LayerSelector::LastK(k) => {
                if *k == 0 || *k > n {
                    return Err(Error::Config(format!(
                        "last_k({k}) on a {n}-layer model"
                    )));
                }
                (n - k..n).collect()
            }
            LayerSelector::Listed(ixs) => {
                if let Some(&bad) = ixs.iter().find(|&&i| i >= n) {
                    return Err(Error::Config(format!(
                        "layer index {bad} out of range for a {n}-layer model"
                    )));
                }
                let mut v = ixs.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        if picked.is_empty() {
            return Err(Error::Config("adapter plan selects no layers".into()));
        }
        Ok(picked)
    }
}

/// Surrogate parameter count r*(D+H) of one adapted layer.
pub fn surrogate_param_count(d: usize, h: usize, r: usize) -> u64 {
    (r as u64) * (d as u64 + h as u64)
}

/// Attach factor pairs per the plan: A ~ N(0, 1/D), B = 0, base frozen.
/// The returned model's outputs are bit-identical to the input model's.
pub fn attach_adapters(model: &DenseModel, plan: &AdapterPlan, seed: u64) -> Result<DenseModel> {
    if plan.rank == 0 {
        return Err(Error::Config("adapter rank must be positive".into()));
    }
    let picked = plan.selected_layers(model)?;
    for &i in &picked {
        let layer = &model.layers[i];
        let min_dim = layer.in_dim().min(layer.out_dim());
        if plan.rank >= min_dim {
            return Err(Error::Config(format!(
                "rank {} is not low-rank for layer {i} ({}x{})",
                plan.rank,
                layer.in_dim(),
                layer.out_dim()
            )));
        }
    }
    let mut out = model.clone();
    for layer in &mut out.layers {
        layer.frozen = true;
    }
    for &i in &picked {
        let layer = &mut out.layers[i];
        let (d, h, r) = (layer.in_dim(), layer.out_dim(), plan.rank);
        let mut rng = substream(seed, &format!("adapter.layer{i}"));
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let a: Vec<f64> = (0..d * r).map(|_| dist.sample(&mut rng)).collect();
        layer.adapter = Some(AdapterPair::new(
            Tensor::from_rows(d, r, a)?,
            Tensor::zeros(vec![r, h]),
        )?);
    }
    Ok(out)
}

/// W + A*B, computed exactly in FP64.
pub fn merge(w: &Tensor, adapter: &AdapterPair) -> Result<Tensor> {
    if w.rows() != adapter.a.rows() || w.cols() != adapter.b.cols() {
        return Err(Error::Dimension(format!(
            "merge of {:?} with adapter {:?} x {:?}",
            w.shape(),
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    let (d, h, r) = (w.rows(), w.cols(), adapter.rank());
    let mut out = w.data().to_vec();
    let mut delta = vec![0.0; d * h];
    matmul_into(adapter.a.data(), adapter.b.data(), &mut delta, d, r, h);
    for (o, dv) in out.iter_mut().zip(&delta) {
        *o += dv;
    }
    Tensor::from_rows(d, h, out)
}

/// Fold every attached adapter into its base weight and drop the adapters.
pub fn merge_adapters(model: &DenseModel) -> Result<DenseModel> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Some(adapter) = layer.adapter.take() {
            layer.weight = merge(&layer.weight, &adapter)?;
        }
    }
    Ok(out)
}

fn check_adapter_training(model: &DenseModel) -> Result<()> {
    if !model.has_adapters() {
        return Err(Error::Config(
            "no adapters attached; nothing to train".into(),
        ));
    }
    if model.layers.iter().any(|l| !l.frozen) {
        return Err(Error::Config(
            "adapter training requires every base layer to be frozen".into(),
        ));
    }
    Ok(())
}

/// Train only the factor pairs against the frozen base. Base weights and
/// biases are byte-identical before and after.
pub fn train_adapters(
    model: &mut DenseModel,
    data: &crate::data::Dataset,
    hyper: &crate::train::Hyper,
) -> Result<crate::train::TrainReport> {
    check_adapter_training(model)?;
    crate::train::train(model, data, hyper)
}

/// `train_adapters` on an explicit subset of the training split.
pub fn train_adapters_on_split(
    model: &mut DenseModel,
    split: &crate::data::Split,
    data: &crate::data::Dataset,
    hyper: &crate::train::Hyper,
) -> Result<crate::train::TrainReport> {
    check_adapter_training(model)?;
    crate::train::train_on_split(model, split, data, hyper)
}

/// Surrogate parameters divided by base weight parameters (biases excluded
/// from the denominator). Zero when no adapters are attached.
pub fn trainable_fraction(model: &DenseModel) -> f64 {
    let surrogate: u64 = model
        .layers
        .iter()
        .filter_map(|l| l.adapter.as_ref().map(AdapterPair::param_count))
        .sum();
    let base = model.base_weight_params();
    if base == 0 {
        return 0.0;
    }
    surrogate as f64 / base as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Activation, Batch, DenseModel, ForwardMode};
    use rand::Rng;

    fn random_batch(model: &DenseModel, n: usize, seed: u64) -> Batch {
        let d = model.input_dim();
        let mut rng = substream(seed, "test.batch");
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| i % model.output_dim()).collect();
        Batch::new(
            Tensor::from_rows(n, d, x).unwrap(),
            labels,
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn attach_is_accuracy_neutral() {
        let model = DenseModel::new(&[6, 5, 4], Activation::Relu, 3).unwrap();
        let plan = AdapterPlan::new(2, LayerSelector::AllLinear);
        let adapted = attach_adapters(&model, &plan, 77).unwrap();
        let batch = random_batch(&model, 4, 9);
        let before = forward(&model, &batch, ForwardMode::Float).unwrap();
        let after = forward(&adapted, &batch, ForwardMode::Float).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn last_k_selects_final_layer() {
        let model = DenseModel::new(&[4, 4, 4, 3], Activation::Relu, 3).unwrap();
        let plan = AdapterPlan::new(1, LayerSelector::LastK(1));
        let adapted = attach_adapters(&model, &plan, 1).unwrap();
        let with: Vec<usize> = adapted
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.adapter.is_some())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(with, vec![2]);
    }

    #[test]
    fn degenerate_rank_is_rejected() {
        let model = DenseModel::new(&[4, 3, 2], Activation::Relu, 3).unwrap();
        let plan = AdapterPlan::new(3, LayerSelector::AllLinear);
        assert!(matches!(
            attach_adapters(&model, &plan, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trainable_param_count_matches_formula() {
        let model = DenseModel::new(&[10, 8, 6], Activation::Relu, 3).unwrap();
        let plan = AdapterPlan::new(2, LayerSelector::AllLinear);
        let adapted = attach_adapters(&model, &plan, 5).unwrap();
        // Oracle: enumerate the factor tensors directly.
        let by_enumeration: u64 = adapted
            .layers
            .iter()
            .filter_map(|l| l.adapter.as_ref())
            .map(|a| (a.a.numel() + a.b.numel()) as u64)
            .sum();
        let by_formula = surrogate_param_count(10, 8, 2) + surrogate_param_count(8, 6, 2);
        assert_eq!(by_enumeration, by_formula);
    }

    #[test]
    fn merge_hand_oracle() {
        // A=[[1],[2]], B=[[3,4]], W=0 -> [[3,4],[6,8]]
        let adapter = AdapterPair::new(
            Tensor::from_rows(2, 1, vec![1.0, 2.0]).unwrap(),
            Tensor::from_rows(1, 2, vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let w = Tensor::zeros(vec![2, 2]);
        let merged = merge(&w, &adapter).unwrap();
        assert_eq!(merged.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let w = Tensor::from_rows(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let adapter = AdapterPair::new(
            Tensor::from_rows(2, 1, vec![0.3, 0.7]).unwrap(),
            Tensor::zeros(vec![1, 2]),
        )
        .unwrap();
        assert_eq!(merge(&w, &adapter).unwrap().data(), w.data());
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let model = DenseModel::new(&[5, 4, 3], Activation::Gelu, 21).unwrap();
        let plan = AdapterPlan::new(2, LayerSelector::AllLinear);
        let mut adapted = attach_adapters(&model, &plan, 13).unwrap();
        // Give B nonzero values so the adapter actually contributes.
        let mut rng = substream(55, "test.bfill");
        for layer in &mut adapted.layers {
            if let Some(ad) = &mut layer.adapter {
                for v in ad.b.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let merged = merge_adapters(&adapted).unwrap();
        let batch = random_batch(&model, 6, 31);
        let via_adapter = forward(&adapted, &batch, ForwardMode::Float).unwrap();
        let via_merge = forward(&merged, &batch, ForwardMode::Float).unwrap();
        for (a, m) in via_adapter.data().iter().zip(via_merge.data()) {
            assert!((a - m).abs() <= 1e-12 * m.abs().max(1.0));
        }
    }

    #[test]
    fn fraction_doubles_with_rank() {
        let model = DenseModel::new(&[16, 12, 8], Activation::Relu, 3).unwrap();
        let f1 = trainable_fraction(
            &attach_adapters(&model, &AdapterPlan::new(2, LayerSelector::AllLinear), 1).unwrap(),
        );
        let f2 = trainable_fraction(
            &attach_adapters(&model, &AdapterPlan::new(4, LayerSelector::AllLinear), 1).unwrap(),
        );
        assert!((f2 - 2.0 * f1).abs() < 1e-15);
    }
}
