//! Dense-network core: linear layers with optional low-rank correction
//! paths, relu/gelu nonlinearities, a softmax-cross-entropy head, and
//! reverse-mode gradients for every parameter.
//!
//! FP64 is the reference arithmetic. Quantized behavior is simulated on top
//! of it: weights are fake-quantized in place by the quantizer module, and
//! activation quantization is applied dynamically at hidden-layer outputs
//! when a layer carries a format with `activation_bits` set and the forward
//! mode requests degraded arithmetic.

use crate::bfp::{bfp_matvec, BfpConfig};
use crate::error::{Error, Result};
use crate::lora::AdapterPair;
use crate::quant::{quantize_activations, QuantFormat};
use crate::rng::substream;
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-layer nonlinearity tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    None,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "none" => Ok(Activation::None),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => gelu(z),
            Activation::None => z,
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_prime(z),
            Activation::None => 1.0,
        }
    }
}

// tanh-form gelu; the derivative below is exact for this form, so gradient
// checks are self-consistent.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Arithmetic used by the high-precision correction path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SurrogatePath {
    /// Direct FP64 matvecs (default).
    Fp64,
    /// Block-floating-point emulation with the given mantissa width.
    Bfp(u32),
}

impl Default for SurrogatePath {
    fn default() -> Self {
        SurrogatePath::Fp64
    }
}

impl SurrogatePath {
    pub fn as_str(&self) -> String {
        match self {
            SurrogatePath::Fp64 => "fp64".to_string(),
            SurrogatePath::Bfp(m) => format!("bfp:{m}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "fp64" {
            return Ok(SurrogatePath::Fp64);
        }
        if let Some(m) = s.strip_prefix("bfp:") {
            let m: u32 = m
                .parse()
                .map_err(|_| Error::Config(format!("bad surrogate datapath {s:?}")))?;
            return Ok(SurrogatePath::Bfp(m));
        }
        Err(Error::Config(format!(
            "surrogate datapath must be fp64 or bfp:M, got {s:?}"
        )))
    }
}

/// One fully connected layer. `weight` is D x H (inputs by outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    /// Frozen base parameters are never touched by a training step.
    pub frozen: bool,
    /// Present once the layer has been fake-quantized; drives activation
    /// quantization in degraded forward modes.
    pub quant_spec: Option<QuantFormat>,
    /// High-precision low-rank correction path, when attached.
    pub adapter: Option<AdapterPair>,
}

impl LinearLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Mini-batch of row-major inputs with integer class labels and stable ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if inputs.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Argument(format!(
                "batch of {} rows with {} labels and {} ids",
                inputs.rows(),
                labels.len(),
                ids.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        Ok(Self { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Arithmetic variant for a forward pass.
///
/// `Float` is the pure FP64 reference and ignores activation quantization.
/// `FakeQuant` and `Perturbed` run the degraded model as deployed: weights as
/// stored (already projected/perturbed) and activations quantized at
/// hidden-layer outputs where a layer format requests it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Float,
    FakeQuant,
    Perturbed,
}

impl ForwardMode {
    fn quantize_activations(&self) -> bool {
        matches!(self, ForwardMode::FakeQuant | ForwardMode::Perturbed)
    }
}

/// Feed-forward stack of linear layers with a softmax-cross-entropy head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub layers: Vec<LinearLayer>,
    /// Datapath used for adapter matvecs in the forward pass.
    pub surrogate_path: SurrogatePath,
}

impl DenseModel {
    /// He-uniform initialized model; hidden layers use `hidden_activation`,
    /// the output layer is linear. Deterministic in `seed`.
    pub fn new(widths: &[usize], hidden_activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "a model needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero layer width".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (d, h) = (pair[0], pair[1]);
            let bound = (6.0 / d as f64).sqrt();
            let mut rng = substream(seed, &format!("init.layer{i}"));
            let data: Vec<f64> = (0..d * h).map(|_| rng.random_range(-bound..bound)).collect();
            let activation = if i + 1 == widths.len() - 1 {
                Activation::None
            } else {
                hidden_activation
            };
            layers.push(LinearLayer {
                weight: Tensor::from_rows(d, h, data)?,
                bias: Tensor::zeros(vec![h]),
                activation,
                frozen: false,
                quant_spec: None,
                adapter: None,
            });
        }
        Ok(Self {
            layers,
            surrogate_path: SurrogatePath::Fp64,
        })
    }

    /// Validates that consecutive layer dimensions chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for i in 1..self.layers.len() {
            let expected = self.layers[i - 1].out_dim();
            let got = self.layers[i].in_dim();
            if expected != got {
                return Err(Error::LayerDimension {
                    layer: i,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated model").out_dim()
    }

    /// Base weight parameter count (weights only, excluding biases); the
    /// denominator for trainable-fraction accounting.
    pub fn base_weight_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.in_dim() * l.out_dim()) as u64)
            .sum()
    }

    /// Total base parameters including biases.
    pub fn base_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.in_dim() * l.out_dim() + l.out_dim()) as u64)
            .sum()
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.adapter.is_some())
    }

    pub fn has_trainable_params(&self) -> bool {
        self.layers.iter().any(|l| !l.frozen || l.adapter.is_some())
    }

    /// Mode matching the model state: quantized layers evaluate under
    /// `FakeQuant`, everything else under `Float`. (Perturbed weights use the
    /// same arithmetic as `Float`; the distinction is bookkeeping.)
    pub fn natural_mode(&self) -> ForwardMode {
        if self
            .layers
            .iter()
            .any(|l| l.quant_spec.is_some_and(|q| q.activation_bits.is_some()))
        {
            ForwardMode::FakeQuant
        } else {
            ForwardMode::Float
        }
    }
}

/// Per-layer caches from a forward pass, retained for the backward sweep.
pub struct ForwardTrace {
    /// Input seen by each layer, after any activation quantization (the
    /// input of layer 0 is the quantized batch).
    layer_inputs: Vec<Tensor>,
    /// Pre-activation z = xW (+ xAB) + b per layer.
    preacts: Vec<Tensor>,
    /// Adapter mid-product x A per layer, when an adapter is attached.
    adapter_mids: Vec<Option<Tensor>>,
    pub logits: Tensor,
}

fn add_bias_rows(z: &mut Tensor, bias: &Tensor) {
    let cols = z.cols();
    for row in 0..z.rows() {
        let start = row * cols;
        for (v, b) in z.data_mut()[start..start + cols].iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn layer_forward(
    layer: &LinearLayer,
    x: &Tensor,
    surrogate: SurrogatePath,
) -> Result<(Tensor, Option<Tensor>)> {
    let (b, d) = (x.rows(), x.cols());
    let h = layer.out_dim();
    let mut z = vec![0.0; b * h];
    matmul_into(x.data(), layer.weight.data(), &mut z, b, d, h);
    let mut mid = None;
    if let Some(adapter) = &layer.adapter {
        let r = adapter.rank();
        let m = match surrogate {
            SurrogatePath::Fp64 => {
                let mut m = vec![0.0; b * r];
                matmul_into(x.data(), adapter.a.data(), &mut m, b, d, r);
                Tensor::from_rows(b, r, m)?
            }
            SurrogatePath::Bfp(mbits) => {
                let cfg = BfpConfig::new(mbits)?;
                let mut m = Vec::with_capacity(b * r);
                for row in 0..b {
                    m.extend(bfp_matvec(x.row(row), &adapter.a, &cfg)?);
                }
                Tensor::from_rows(b, r, m)?
            }
        };
        match surrogate {
            SurrogatePath::Fp64 => {
                matmul_into(m.data(), adapter.b.data(), &mut z, b, r, h);
            }
            SurrogatePath::Bfp(mbits) => {
                let cfg = BfpConfig::new(mbits)?;
                for row in 0..b {
                    let delta = bfp_matvec(m.row(row), &adapter.b, &cfg)?;
                    for (zv, dv) in z[row * h..(row + 1) * h].iter_mut().zip(&delta) {
                        *zv += dv;
                    }
                }
            }
        }
        mid = Some(m);
    }
    let mut z = Tensor::from_rows(b, h, z)?;
    add_bias_rows(&mut z, &layer.bias);
    Ok((z, mid))
}

/// Run the model on a batch, retaining the caches backward needs.
pub fn forward_trace(model: &DenseModel, inputs: &Tensor, mode: ForwardMode) -> Result<ForwardTrace> {
    model.validate()?;
    if inputs.cols() != model.input_dim() {
        return Err(Error::LayerDimension {
            layer: 0,
            expected: model.input_dim(),
            got: inputs.cols(),
        });
    }
    let mut layer_inputs = Vec::with_capacity(model.layers.len());
    let mut preacts = Vec::with_capacity(model.layers.len());
    let mut adapter_mids = Vec::with_capacity(model.layers.len());
    let mut x = inputs.clone();
    for layer in &model.layers {
        // Each layer consumes a quantized activation tensor when its format
        // requests one; this covers the model input (seen by layer 0) and
        // every hidden output, and never touches the logits.
        if mode.quantize_activations() {
            if let Some(bits) = layer.quant_spec.and_then(|q| q.activation_bits) {
                x = quantize_activations(&x, bits);
            }
        }
        let (z, mid) = layer_forward(layer, &x, model.surrogate_path)?;
        let a = Tensor::from_rows(
            z.rows(),
            z.cols(),
            z.data().iter().map(|&v| layer.activation.apply(v)).collect(),
        )?;
        layer_inputs.push(x);
        preacts.push(z);
        adapter_mids.push(mid);
        x = a;
    }
    if !x.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardTrace {
        layer_inputs,
        preacts,
        adapter_mids,
        logits: x,
    })
}

/// Forward pass producing logits (B x num_classes).
pub fn forward(model: &DenseModel, batch: &Batch, mode: ForwardMode) -> Result<Tensor> {
    Ok(forward_trace(model, &batch.inputs, mode)?.logits)
}

/// Gradients for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    /// (dA, dB) when the layer has an adapter.
    pub adapter: Option<(Tensor, Tensor)>,
}

/// Gradients for every parameter tensor in the model, frozen or not.
/// Training steps skip frozen entries; sensitivity scoring reads all of them.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

/// Mean softmax-cross-entropy over the batch plus the gradient of every
/// parameter. Gradients flow through activation quantization with a
/// straight-through estimator (identity), the standard choice for training
/// against a fake-quantized forward pass.
pub fn loss_and_grads(model: &DenseModel, batch: &Batch, mode: ForwardMode) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let classes = model.output_dim();
    for (&label, &id) in batch.labels.iter().zip(&batch.ids) {
        if label >= classes {
            return Err(Error::Argument(format!(
                "label {label} of sample {id} exceeds class count {classes}"
            )));
        }
    }
    let trace = forward_trace(model, &batch.inputs, mode)?;
    let b = batch.len();
    let logits = &trace.logits;

    // Stable softmax cross-entropy and its gradient.
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; b * classes];
    for row in 0..b {
        let lrow = logits.row(row);
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = lrow.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - lrow[batch.labels[row]];
        let drow = &mut dlogits[row * classes..(row + 1) * classes];
        for (j, (&v, dv)) in lrow.iter().zip(drow.iter_mut()).enumerate() {
            let p = (v - max).exp() / sum_exp;
            *dv = (p - if j == batch.labels[row] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    // Backward sweep. Activation quantization backpropagates as identity.
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(model.layers.len());
    let mut da = dlogits;
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let x = &trace.layer_inputs[i];
        let z = &trace.preacts[i];
        let (d, h) = (layer.in_dim(), layer.out_dim());

        let mut dz = da;
        for (g, &zv) in dz.iter_mut().zip(z.data()) {
            *g *= layer.activation.derivative(zv);
        }

        let mut dbias = vec![0.0; h];
        for row in 0..b {
            for (bias_g, &g) in dbias.iter_mut().zip(&dz[row * h..(row + 1) * h]) {
                *bias_g += g;
            }
        }

        let mut dweight = vec![0.0; d * h];
        matmul_at_b_into(x.data(), &dz, &mut dweight, b, d, h);

        let mut dx = vec![0.0; b * d];
        matmul_a_bt_into(&dz, layer.weight.data(), &mut dx, b, h, d);

        let adapter_grads = if let Some(adapter) = &layer.adapter {
            let r = adapter.rank();
            let mid = trace.adapter_mids[i].as_ref().expect("adapter mid cached");
            let mut db_mat = vec![0.0; r * h];
            matmul_at_b_into(mid.data(), &dz, &mut db_mat, b, r, h);
            let mut dmid = vec![0.0; b * r];
            matmul_a_bt_into(&dz, adapter.b.data(), &mut dmid, b, h, r);
            let mut da_mat = vec![0.0; d * r];
            matmul_at_b_into(x.data(), &dmid, &mut da_mat, b, d, r);
            matmul_a_bt_into(&dmid, adapter.a.data(), &mut dx, b, r, d);
            Some((
                Tensor::from_rows(d, r, da_mat)?,
                Tensor::from_rows(r, h, db_mat)?,
            ))
        } else {
            None
        };

        grads.push(LayerGrads {
            weight: Tensor::from_rows(d, h, dweight)?,
            bias: Tensor::new(vec![h], dbias)?,
            adapter: adapter_grads,
        });
        da = dx;
    }
    grads.reverse();
    Ok((loss, Grads { layers: grads }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(dim: usize) -> DenseModel {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        DenseModel {
            layers: vec![LinearLayer {
                weight: Tensor::from_rows(dim, dim, w).unwrap(),
                bias: Tensor::zeros(vec![dim]),
                activation: Activation::None,
                frozen: false,
                quant_spec: None,
                adapter: None,
            }],
            surrogate_path: SurrogatePath::Fp64,
        }
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let model = identity_model(2);
        let batch = Batch::new(
            Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap(),
            vec![0],
            vec![0],
        )
        .unwrap();
        let logits = forward(&model, &batch, ForwardMode::Float).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let model = DenseModel::new(&[4, 3, 2], Activation::Relu, 9).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![2, 4]), vec![0, 1], vec![0, 1]).unwrap();
        let logits = forward(&model, &batch, ForwardMode::Float).unwrap();
        // biases are zero at init, relu(0)=0
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_independent_gemm_oracle() {
        let model = DenseModel::new(&[3, 5, 4], Activation::Relu, 42).unwrap();
        let mut rng = substream(7, "test.fwd");
        let x: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch::new(
            Tensor::from_rows(2, 3, x.clone()).unwrap(),
            vec![0, 1],
            vec![0, 1],
        )
        .unwrap();
        let logits = forward(&model, &batch, ForwardMode::Float).unwrap();

        // Oracle: straightforward nested-loop forward.
        let mut cur = x;
        let mut cur_cols = 3;
        for (li, layer) in model.layers.iter().enumerate() {
            let h = layer.out_dim();
            let rows = cur.len() / cur_cols;
            let mut next = vec![0.0; rows * h];
            for r in 0..rows {
                for j in 0..h {
                    let mut s = layer.bias.data()[j];
                    for d in 0..cur_cols {
                        s += cur[r * cur_cols + d] * layer.weight.data()[d * h + j];
                    }
                    next[r * h + j] = if li == 0 { s.max(0.0) } else { s };
                }
            }
            cur = next;
            cur_cols = h;
        }
        for (a, e) in logits.data().iter().zip(&cur) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let model = DenseModel::new(&[4, 3, 2], Activation::Relu, 1).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![1, 5]), vec![0], vec![0]).unwrap();
        match forward(&model, &batch, ForwardMode::Float) {
            Err(Error::LayerDimension { layer: 0, .. }) => {}
            other => panic!("expected layer dimension error, got {other:?}"),
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(Batch::new(Tensor::zeros(vec![1, 2]), vec![], vec![]).is_err());
    }

    #[test]
    fn duplicated_sample_contributes_identically() {
        let model = DenseModel::new(&[3, 4, 2], Activation::Gelu, 11).unwrap();
        let x = vec![0.3, -0.8, 1.1];
        let single = Batch::new(
            Tensor::from_rows(1, 3, x.clone()).unwrap(),
            vec![1],
            vec![0],
        )
        .unwrap();
        let double = Batch::new(
            Tensor::from_rows(2, 3, [x.clone(), x].concat()).unwrap(),
            vec![1, 1],
            vec![0, 1],
        )
        .unwrap();
        let (l1, g1) = loss_and_grads(&model, &single, ForwardMode::Float).unwrap();
        let (l2, g2) = loss_and_grads(&model, &double, ForwardMode::Float).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let model = DenseModel::new(&[2, 3], Activation::None, 5).unwrap();
        let batch = Batch::new(
            Tensor::from_rows(2, 2, vec![0.5, -0.2, 1.0, 2.0]).unwrap(),
            vec![2, 0],
            vec![0, 1],
        )
        .unwrap();
        let (loss, _) = loss_and_grads(&model, &batch, ForwardMode::Float).unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let model = DenseModel::new(&[2, 3], Activation::None, 5).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![1, 2]), vec![3], vec![0]).unwrap();
        assert!(matches!(
            loss_and_grads(&model, &batch, ForwardMode::Float),
            Err(Error::Argument(_))
        ));
    }
}
