//! Ultra-low-precision main-path quantizers: INT8, FP4 (E2M1) and NF4, with
//! per-tensor or per-channel scaling, dequantization, and whole-model fake
//! quantization.
//!
//! All quantization here is symmetric (no zero point). 4-bit kinds map values
//! to the nearest codebook entry with ties broken toward zero; INT8 uses
//! round-half-even on `x/scale*127`. Fake quantization replaces a value by
//! `dequantize(quantize(value))` so low-precision effects are simulated in
//! FP64 arithmetic.

use crate::error::{Error, Result};
use crate::model::DenseModel;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// 16-level 4-bit code whose levels are quantiles of a standard normal,
/// normalized to [-1, 1] and including 0.
///
/// Computed from the usual construction: 8 positive-side quantiles of N(0,1)
/// at probabilities linspace(0.9677083, 0.5, 9) (endpoint dropped), 7 mirrored
/// negative-side quantiles from an 8-point linspace, plus 0, all divided by
/// the largest magnitude.
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.69619289060372,
    -0.5250730386952291,
    -0.3949174906993099,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427931,
    0.0,
    0.07958032909416937,
    0.16093017270493618,
    0.2461122939299359,
    0.33791519352165506,
    0.44070980241319013,
    0.562616970075237,
    0.7229567278928821,
    1.0,
];

/// FP4 E2M1 magnitude set {0, 0.5, 1, 1.5, 2, 3, 4, 6} scaled to unit max,
/// signed. The format has 16 codes but +0 and -0 coincide, leaving 15
/// distinct values.
pub const FP4_E2M1_LEVELS: [f64; 15] = [
    -1.0,
    -2.0 / 3.0,
    -0.5,
    -1.0 / 3.0,
    -0.25,
    -1.0 / 6.0,
    -1.0 / 12.0,
    0.0,
    1.0 / 12.0,
    1.0 / 6.0,
    0.25,
    1.0 / 3.0,
    0.5,
    2.0 / 3.0,
    1.0,
];

/// Symmetric INT8 code range is [-127, 127]; -128 is never produced.
pub const INT8_QMAX: f64 = 127.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Int8,
    Fp4E2m1,
    Nf4,
}

impl QuantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantKind::Int8 => "int8",
            QuantKind::Fp4E2m1 => "fp4_e2m1",
            QuantKind::Nf4 => "nf4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(QuantKind::Int8),
            "fp4_e2m1" | "fp4" => Ok(QuantKind::Fp4E2m1),
            "nf4" => Ok(QuantKind::Nf4),
            other => Err(Error::Config(format!("unknown quantization kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerChannel => "per_channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_channel" => Ok(Granularity::PerChannel),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Weight format plus optional activation bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantFormat {
    pub kind: QuantKind,
    pub granularity: Granularity,
    /// Bits for dynamic activation quantization at hidden-layer outputs;
    /// `None` leaves activations at full precision. Must be 4 or 8.
    pub activation_bits: Option<u8>,
}

impl QuantFormat {
    pub fn new(kind: QuantKind, granularity: Granularity, activation_bits: Option<u8>) -> Result<Self> {
        if let Some(b) = activation_bits {
            if b != 4 && b != 8 {
                return Err(Error::Config(format!(
                    "activation_bits must be 4 or 8, got {b}"
                )));
            }
        }
        Ok(Self {
            kind,
            granularity,
            activation_bits,
        })
    }

    pub fn per_tensor(kind: QuantKind) -> Self {
        Self {
            kind,
            granularity: Granularity::PerTensor,
            activation_bits: None,
        }
    }
}

/// Codes of a quantized tensor: signed bytes for INT8, codebook indices for
/// the 4-bit kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    Int8(Vec<i8>),
    FourBit(Vec<u8>),
}

impl Codes {
    pub fn len(&self) -> usize {
        match self {
            Codes::Int8(v) => v.len(),
            Codes::FourBit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Quantized tensor: codes plus scale metadata and the originating format.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub codes: Codes,
    /// One scale per granularity group (1 for per-tensor, `cols` for
    /// per-channel on a 2-D tensor). A scale is the max-abs of its group.
    pub scales: Vec<f64>,
    pub format: QuantFormat,
    pub shape: Vec<usize>,
}

/// Ordered list of distinct representable values for a 4-bit kind.
///
/// NF4 has 16 strictly increasing entries with endpoints -1 and +1; FP4 E2M1
/// has 15 (its two zero codes collapse). INT8 is not codebook-based.
pub fn codebook(kind: QuantKind) -> Result<&'static [f64]> {
    match kind {
        QuantKind::Nf4 => Ok(&NF4_LEVELS),
        QuantKind::Fp4E2m1 => Ok(&FP4_E2M1_LEVELS),
        QuantKind::Int8 => Err(Error::UnsupportedFormat(
            "int8 has no 4-bit codebook".into(),
        )),
    }
}

/// Index of the codebook entry nearest to `u`, ties broken toward the entry
/// nearer zero. `table` must be sorted ascending.
fn nearest_code(table: &[f64], u: f64) -> u8 {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &level) in table.iter().enumerate() {
        let d = (u - level).abs();
        if d < best_dist || (d == best_dist && level.abs() < table[best].abs()) {
            best = i;
            best_dist = d;
        }
    }
    best as u8
}

/// Number of scale groups and the group index of each element.
fn group_layout(shape: &[usize], granularity: Granularity) -> (usize, Option<usize>) {
    match granularity {
        Granularity::PerTensor => (1, None),
        Granularity::PerChannel => {
            // Channel = output column of a 2-D tensor; 1-D tensors fall back
            // to per-tensor.
            if shape.len() == 2 {
                (shape[1], Some(shape[1]))
            } else {
                (1, None)
            }
        }
    }
}

fn group_of(index: usize, cols: Option<usize>) -> usize {
    match cols {
        Some(c) => index % c,
        None => 0,
    }
}

/// Quantize a finite tensor. Total on finite input: all-zero groups get
/// scale 1 and the zero code.
pub fn quantize_tensor(x: &Tensor, format: &QuantFormat) -> QTensor {
    let (ngroups, cols) = group_layout(x.shape(), format.granularity);
    let mut scales = vec![0.0f64; ngroups];
    for (i, &v) in x.data().iter().enumerate() {
        let g = group_of(i, cols);
        scales[g] = scales[g].max(v.abs());
    }
    for s in &mut scales {
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let codes = match format.kind {
        QuantKind::Int8 => {
            let v = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let s = scales[group_of(i, cols)];
                    let q = (v / s * INT8_QMAX).round_ties_even();
                    q.clamp(-INT8_QMAX, INT8_QMAX) as i8
                })
                .collect();
            Codes::Int8(v)
        }
        kind => {
            let table = codebook(kind).expect("4-bit kind has a codebook");
            let v = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| nearest_code(table, v / scales[group_of(i, cols)]))
                .collect();
            Codes::FourBit(v)
        }
    };
    QTensor {
        codes,
        scales,
        format: *format,
        shape: x.shape().to_vec(),
    }
}

/// Reconstruct real values from codes: `codebook[code]*scale` for 4-bit,
/// `code*scale/127` for INT8.
pub fn dequantize(q: &QTensor) -> Result<Tensor> {
    let (_, cols) = group_layout(&q.shape, q.format.granularity);
    let n: usize = q.shape.iter().product();
    if q.codes.len() != n {
        return Err(Error::Integrity(format!(
            "code count {} does not match shape {:?}",
            q.codes.len(),
            q.shape
        )));
    }
    let data: Vec<f64> = match &q.codes {
        Codes::Int8(v) => v
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if c == i8::MIN {
                    return Err(Error::Integrity(format!(
                        "int8 code -128 at element {i} is outside the symmetric range"
                    )));
                }
                Ok(f64::from(c) * q.scales[group_of(i, cols)] / INT8_QMAX)
            })
            .collect::<Result<_>>()?,
        Codes::FourBit(v) => {
            let table = codebook(q.format.kind)?;
            v.iter()
                .enumerate()
                .map(|(i, &c)| {
                    table
                        .get(c as usize)
                        .map(|&level| level * q.scales[group_of(i, cols)])
                        .ok_or_else(|| {
                            Error::Integrity(format!(
                                "code index {c} at element {i} exceeds the {}-entry codebook",
                                table.len()
                            ))
                        })
                })
                .collect::<Result<_>>()?
        }
    };
    Tensor::new(q.shape.clone(), data)
}

/// Fake-quantize a value in place: `dequantize(quantize(v))`.
pub fn fake_quantize_tensor(x: &Tensor, format: &QuantFormat) -> Tensor {
    dequantize(&quantize_tensor(x, format)).expect("roundtrip of freshly quantized tensor")
}

/// Dynamic uniform symmetric quantization of an activation tensor at `bits`
/// (4 or 8), scale taken from the live tensor. The all-zero tensor is
/// returned unchanged.
pub fn quantize_activations(x: &Tensor, bits: u8) -> Tensor {
    let qmax = f64::from((1i32 << (bits - 1)) - 1);
    let scale = x.max_abs();
    if scale == 0.0 {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| (v / scale * qmax).round_ties_even() * scale / qmax)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("activation quantization preserves shape")
}

/// Replace every linear weight by its fake-quantized image, record the format
/// on each layer (enabling activation quantization in quantized forward
/// modes), and freeze the base. Idempotent: quantization is a projection.
pub fn fake_quantize_model(model: &DenseModel, format: &QuantFormat) -> DenseModel {
    let mut out = model.clone();
    for layer in &mut out.layers {
        layer.weight = fake_quantize_tensor(&layer.weight, format);
        layer.quant_spec = Some(*format);
        layer.frozen = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nf4_codebook_shape() {
        let t = codebook(QuantKind::Nf4).unwrap();
        assert_eq!(t.len(), 16);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(t[0], -1.0);
        assert_eq!(t[15], 1.0);
    }

    #[test]
    fn fp4_codebook_contains_unit_endpoints() {
        let t = codebook(QuantKind::Fp4E2m1).unwrap();
        assert!(t.contains(&1.0));
        assert!(t.contains(&-1.0));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        // 16 codes, two of which encode zero.
        assert_eq!(t.len(), 15);
    }

    #[test]
    fn int8_has_no_codebook() {
        assert!(matches!(
            codebook(QuantKind::Int8),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn int8_example_codes() {
        // Oracle: round_half_even(x/scale*127) with scale = max|x| = 2.
        let x = Tensor::new(vec![3], vec![-2.0, 0.0, 1.0]).unwrap();
        let q = quantize_tensor(&x, &QuantFormat::per_tensor(QuantKind::Int8));
        assert_eq!(q.scales, vec![2.0]);
        match &q.codes {
            Codes::Int8(v) => assert_eq!(v.as_slice(), &[-127, 0, 64]),
            _ => panic!("int8 codes expected"),
        }
        // The max element dequantizes exactly.
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data()[0], -2.0);
    }

    #[test]
    fn all_zero_tensor_quantizes_to_zero_codes() {
        let x = Tensor::zeros(vec![4]);
        for kind in [QuantKind::Int8, QuantKind::Fp4E2m1, QuantKind::Nf4] {
            let q = quantize_tensor(&x, &QuantFormat::per_tensor(kind));
            assert_eq!(q.scales, vec![1.0]);
            let back = dequantize(&q).unwrap();
            assert!(back.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_nonzero_value_is_exact_for_all_kinds() {
        for kind in [QuantKind::Int8, QuantKind::Fp4E2m1, QuantKind::Nf4] {
            let x = Tensor::new(vec![3], vec![0.0, -0.7125, 0.0]).unwrap();
            let q = quantize_tensor(&x, &QuantFormat::per_tensor(kind));
            let back = dequantize(&q).unwrap();
            assert_eq!(back.data()[1], -0.7125, "kind {kind:?}");
        }
    }

    #[test]
    fn corrupted_code_index_is_an_integrity_error() {
        let q = QTensor {
            codes: Codes::FourBit(vec![15]),
            scales: vec![1.0],
            format: QuantFormat::per_tensor(QuantKind::Fp4E2m1),
            shape: vec![1],
        };
        assert!(matches!(dequantize(&q), Err(Error::Integrity(_))));
        let q = QTensor {
            codes: Codes::Int8(vec![i8::MIN]),
            scales: vec![1.0],
            format: QuantFormat::per_tensor(QuantKind::Int8),
            shape: vec![1],
        };
        assert!(matches!(dequantize(&q), Err(Error::Integrity(_))));
    }

    #[test]
    fn per_channel_scales_follow_columns() {
        let x = Tensor::from_rows(2, 3, vec![1.0, -4.0, 0.5, -2.0, 2.0, 0.25]).unwrap();
        let fmt = QuantFormat {
            kind: QuantKind::Int8,
            granularity: Granularity::PerChannel,
            activation_bits: None,
        };
        let q = quantize_tensor(&x, &fmt);
        assert_eq!(q.scales, vec![2.0, 4.0, 0.5]);
    }

    #[test]
    fn activation_quantization_is_dynamic_and_total() {
        let x = Tensor::new(vec![4], vec![0.0, 0.5, 1.0, -1.0]).unwrap();
        let q = quantize_activations(&x, 4);
        // 4-bit symmetric: steps of max/7.
        for (orig, quant) in x.data().iter().zip(q.data()) {
            assert!((orig - quant).abs() <= 1.0 / 7.0 / 2.0 + 1e-15);
        }
        let z = Tensor::zeros(vec![3]);
        assert_eq!(quantize_activations(&z, 4).data(), z.data());
    }
}
