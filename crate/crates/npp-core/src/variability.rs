//! Process-variability injection: multiplicative Gaussian noise on weights,
//! frozen per run, emulating fabrication-time imperfections of analog or
//! in-memory hardware.

use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::rng::substream;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which layers to perturb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbScope {
    AllLayers,
    Layers(Vec<usize>),
}

/// Relative noise level, seed, and scope of a perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Relative standard deviation (dimensionless), >= 0.
    pub sigma: f64,
    pub seed: u64,
    pub scope: PerturbScope,
    /// Apply the additive variant `w + w*(1 + n)` instead of the default
    /// multiplicative `w*(1 + n)`. The additive form triples nothing but the
    /// mean weight magnitude even at sigma = 0; it exists for side-by-side
    /// comparison only.
    pub literal_sum: bool,
}

impl PerturbSpec {
    pub fn multiplicative(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            seed,
            scope: PerturbScope::AllLayers,
            literal_sum: false,
        }
    }
}

/// Return a copy of the model with each in-scope weight w replaced by
/// w*(1 + n), n ~ N(0, sigma^2) i.i.d. from the spec seed (one substream per
/// layer). Biases are untouched; zero weights stay exactly zero.
pub fn perturb_weights(model: &DenseModel, spec: &PerturbSpec) -> Result<DenseModel> {
    if !spec.sigma.is_finite() || spec.sigma < 0.0 {
        return Err(Error::Argument(format!(
            "sigma must be finite and non-negative, got {}",
            spec.sigma
        )));
    }
    let in_scope: Vec<usize> = match &spec.scope {
        PerturbScope::AllLayers => (0..model.layers.len()).collect(),
        PerturbScope::Layers(ixs) => {
            if let Some(&bad) = ixs.iter().find(|&&i| i >= model.layers.len()) {
                return Err(Error::Argument(format!(
                    "perturb layer index {bad} out of range ({} layers)",
                    model.layers.len()
                )));
            }
            let mut v = ixs.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let mut out = model.clone();
    if spec.sigma == 0.0 && !spec.literal_sum {
        return Ok(out);
    }
    for &i in &in_scope {
        let mut rng = substream(spec.seed, &format!("perturb.layer{i}"));
        let noise = Normal::new(0.0, spec.sigma).expect("valid sigma");
        for w in out.layers[i].weight.data_mut() {
            let n = if spec.sigma == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            *w = if spec.literal_sum {
                *w + *w * (1.0 + n)
            } else {
                *w * (1.0 + n)
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, DenseModel};

    #[test]
    fn zero_sigma_is_byte_identical() {
        let model = DenseModel::new(&[8, 6, 4], Activation::Relu, 3).unwrap();
        let spec = PerturbSpec::multiplicative(0.0, 99);
        let perturbed = perturb_weights(&model, &spec).unwrap();
        assert_eq!(model, perturbed);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let model = DenseModel::new(&[8, 6, 4], Activation::Relu, 3).unwrap();
        let spec = PerturbSpec::multiplicative(0.05, 42);
        let a = perturb_weights(&model, &spec).unwrap();
        let b = perturb_weights(&model, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_std_matches_sigma() {
        // Monte Carlo contract: std of (w'/w - 1) over >= 1e5 weights must
        // land in [0.049, 0.051] at sigma = 0.05.
        let model = DenseModel::new(&[400, 300], Activation::None, 5).unwrap();
        assert!(model.layers[0].weight.numel() >= 100_000);
        let spec = PerturbSpec::multiplicative(0.05, 7);
        let perturbed = perturb_weights(&model, &spec).unwrap();
        let ratios: Vec<f64> = model.layers[0]
            .weight
            .data()
            .iter()
            .zip(perturbed.layers[0].weight.data())
            .map(|(&w, &wp)| wp / w - 1.0)
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.049..=0.051).contains(&std), "std {std}");
        // Mean relative change within 3 standard errors of zero.
        let se = 0.05 / n.sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn biases_and_out_of_scope_layers_are_untouched() {
        let mut model = DenseModel::new(&[4, 4, 4], Activation::Relu, 3).unwrap();
        for (i, l) in model.layers.iter_mut().enumerate() {
            for (j, b) in l.bias.data_mut().iter_mut().enumerate() {
                *b = (i * 10 + j) as f64;
            }
        }
        let spec = PerturbSpec {
            sigma: 0.1,
            seed: 1,
            scope: PerturbScope::Layers(vec![1]),
            literal_sum: false,
        };
        let perturbed = perturb_weights(&model, &spec).unwrap();
        assert_eq!(perturbed.layers[0].weight, model.layers[0].weight);
        assert_ne!(perturbed.layers[1].weight, model.layers[1].weight);
        for (a, b) in perturbed.layers.iter().zip(&model.layers) {
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn zero_weights_stay_zero() {
        let mut model = DenseModel::new(&[4, 4], Activation::None, 3).unwrap();
        model.layers[0].weight.data_mut()[5] = 0.0;
        let spec = PerturbSpec::multiplicative(0.3, 8);
        let perturbed = perturb_weights(&model, &spec).unwrap();
        assert_eq!(perturbed.layers[0].weight.data()[5], 0.0);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let model = DenseModel::new(&[4, 4], Activation::None, 3).unwrap();
        assert!(perturb_weights(&model, &PerturbSpec::multiplicative(-0.1, 0)).is_err());
    }

    #[test]
    fn literal_sum_variant_doubles_weights_at_zero_sigma() {
        let model = DenseModel::new(&[4, 4], Activation::None, 3).unwrap();
        let spec = PerturbSpec {
            sigma: 0.0,
            seed: 0,
            scope: PerturbScope::AllLayers,
            literal_sum: true,
        };
        let perturbed = perturb_weights(&model, &spec).unwrap();
        for (a, b) in perturbed.layers[0]
            .weight
            .data()
            .iter()
            .zip(model.layers[0].weight.data())
        {
            assert_eq!(*a, 2.0 * b);
        }
    }
}
