//! Model checkpoints, format `npp-ckpt-1`: a little-endian u64 header length,
//! a UTF-8 JSON header describing layers and data blocks, then the block
//! payloads back to back in declaration order.
//!
//! Full-precision blocks are raw little-endian FP64. Weights of quantized
//! layers are stored as codes (4-bit codes packed two per byte, low nibble
//! first) preceded by their little-endian FP64 scales; storing codes is
//! lossless because fake-quantized weights are fixed points of the
//! quantizer. Adapters serialize as additional named blocks
//! (`adapter.<layer>.A`, `adapter.<layer>.B`).

use crate::error::{Error, Result};
use crate::lora::AdapterPair;
use crate::model::{Activation, DenseModel, LinearLayer, SurrogatePath};
use crate::quant::{dequantize, quantize_tensor, Codes, Granularity, QTensor, QuantFormat, QuantKind};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: &str = "npp-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct CkptQuant {
    kind: String,
    granularity: String,
    activation_bits: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptLayer {
    in_dim: usize,
    out_dim: usize,
    activation: String,
    frozen: bool,
    quant: Option<CkptQuant>,
    adapter_rank: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptBlock {
    name: String,
    /// "f64", "i8" or "q4".
    kind: String,
    shape: Vec<usize>,
    /// Number of scales preceding the payload (0 for f64 blocks).
    scales: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    surrogate_path: String,
    layers: Vec<CkptLayer>,
    blocks: Vec<CkptBlock>,
}

fn f64_bytes(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let low = pair[0] & 0x0f;
        let high = if pair.len() == 2 { pair[1] & 0x0f } else { 0 };
        out.push(low | (high << 4));
    }
    out
}

fn unpack_nibbles(bytes: &[u8], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        out.push(b & 0x0f);
        if out.len() < n {
            out.push(b >> 4);
        }
        if out.len() >= n {
            break;
        }
    }
    out
}

/// A weight is stored as codes only when requantizing reproduces it exactly;
/// perturbed-after-quantization weights fall back to raw FP64.
fn quantized_block(weight: &Tensor, spec: &QuantFormat) -> Option<QTensor> {
    let q = quantize_tensor(weight, spec);
    let back = dequantize(&q).ok()?;
    if back.data() == weight.data() {
        Some(q)
    } else {
        None
    }
}

/// Serialize a model to `npp-ckpt-1` bytes.
pub fn model_to_bytes(model: &DenseModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let weight_q = layer
            .quant_spec
            .as_ref()
            .and_then(|spec| quantized_block(&layer.weight, spec));
        match &weight_q {
            Some(q) => {
                let kind = match q.codes {
                    Codes::Int8(_) => "i8",
                    Codes::FourBit(_) => "q4",
                };
                blocks.push(CkptBlock {
                    name: format!("layer.{i}.weight"),
                    kind: kind.into(),
                    shape: q.shape.clone(),
                    scales: q.scales.len(),
                });
                f64_bytes(&q.scales, &mut payload);
                match &q.codes {
                    Codes::Int8(v) => payload.extend(v.iter().map(|&c| c as u8)),
                    Codes::FourBit(v) => payload.extend(pack_nibbles(v)),
                }
            }
            None => {
                blocks.push(CkptBlock {
                    name: format!("layer.{i}.weight"),
                    kind: "f64".into(),
                    shape: layer.weight.shape().to_vec(),
                    scales: 0,
                });
                f64_bytes(layer.weight.data(), &mut payload);
            }
        }
        blocks.push(CkptBlock {
            name: format!("layer.{i}.bias"),
            kind: "f64".into(),
            shape: layer.bias.shape().to_vec(),
            scales: 0,
        });
        f64_bytes(layer.bias.data(), &mut payload);
        if let Some(adapter) = &layer.adapter {
            blocks.push(CkptBlock {
                name: format!("adapter.{i}.A"),
                kind: "f64".into(),
                shape: adapter.a.shape().to_vec(),
                scales: 0,
            });
            f64_bytes(adapter.a.data(), &mut payload);
            blocks.push(CkptBlock {
                name: format!("adapter.{i}.B"),
                kind: "f64".into(),
                shape: adapter.b.shape().to_vec(),
                scales: 0,
            });
            f64_bytes(adapter.b.data(), &mut payload);
        }
    }
    let header = CkptHeader {
        format: FORMAT_VERSION.into(),
        surrogate_path: model.surrogate_path.as_str(),
        layers: model
            .layers
            .iter()
            .map(|l| CkptLayer {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation.as_str().into(),
                frozen: l.frozen,
                quant: l.quant_spec.map(|q| CkptQuant {
                    kind: q.kind.as_str().into(),
                    granularity: q.granularity.as_str().into(),
                    activation_bits: q.activation_bits,
                }),
                adapter_rank: l.adapter.as_ref().map(AdapterPair::rank),
            })
            .collect(),
        blocks,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_model(path: &Path, model: &DenseModel) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    Ok(())
}

struct BlockReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlockReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn parse_quant(q: &CkptQuant) -> Result<QuantFormat> {
    QuantFormat::new(
        QuantKind::parse(&q.kind)?,
        Granularity::parse(&q.granularity)?,
        q.activation_bits,
    )
}

fn read_weight(
    block: &CkptBlock,
    layer: &CkptLayer,
    reader: &mut BlockReader,
) -> Result<Tensor> {
    let numel: usize = block.shape.iter().product();
    match block.kind.as_str() {
        "f64" => Tensor::new(block.shape.clone(), reader.f64s(numel, &block.name)?),
        "i8" | "q4" => {
            let quant = layer.quant.as_ref().ok_or_else(|| {
                Error::Format(format!(
                    "block {} is quantized but its layer declares no format",
                    block.name
                ))
            })?;
            let format = parse_quant(quant)?;
            let scales = reader.f64s(block.scales, &block.name)?;
            let codes = if block.kind == "i8" {
                let raw = reader.take(numel, &block.name)?;
                Codes::Int8(raw.iter().map(|&b| b as i8).collect())
            } else {
                let raw = reader.take(numel.div_ceil(2), &block.name)?;
                Codes::FourBit(unpack_nibbles(raw, numel))
            };
            dequantize(&QTensor {
                codes,
                scales,
                format,
                shape: block.shape.clone(),
            })
        }
        other => Err(Error::Format(format!(
            "unknown block kind {other:?} in {}",
            block.name
        ))),
    }
}

/// Reconstruct a model from `npp-ckpt-1` bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DenseModel> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "checkpoint shorter than its length prefix".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if 8 + header_len > bytes.len() {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?} (expected {FORMAT_VERSION:?})",
            header.format
        )));
    }
    let mut reader = BlockReader {
        bytes: &bytes[8 + header_len..],
        pos: 0,
    };
    fn next<'a>(
        blocks: &mut std::slice::Iter<'a, CkptBlock>,
        want: &str,
    ) -> Result<&'a CkptBlock> {
        let b = blocks
            .next()
            .ok_or_else(|| Error::Format(format!("missing block {want}")))?;
        if b.name != want {
            return Err(Error::Format(format!(
                "expected block {want}, found {}",
                b.name
            )));
        }
        Ok(b)
    }
    let mut blocks = header.blocks.iter();
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, l) in header.layers.iter().enumerate() {
        let wblock = next(&mut blocks, &format!("layer.{i}.weight"))?;
        let weight = read_weight(wblock, l, &mut reader)?;
        if weight.shape() != [l.in_dim, l.out_dim] {
            return Err(Error::Format(format!(
                "layer {i} weight shape {:?} does not match declared {}x{}",
                weight.shape(),
                l.in_dim,
                l.out_dim
            )));
        }
        let bblock = next(&mut blocks, &format!("layer.{i}.bias"))?;
        let bias = Tensor::new(
            bblock.shape.clone(),
            reader.f64s(bblock.shape.iter().product(), &bblock.name)?,
        )?;
        let adapter = match l.adapter_rank {
            Some(rank) => {
                let ablock = next(&mut blocks, &format!("adapter.{i}.A"))?;
                let a = Tensor::new(
                    ablock.shape.clone(),
                    reader.f64s(ablock.shape.iter().product(), &ablock.name)?,
                )?;
                let bblock = next(&mut blocks, &format!("adapter.{i}.B"))?;
                let b = Tensor::new(
                    bblock.shape.clone(),
                    reader.f64s(bblock.shape.iter().product(), &bblock.name)?,
                )?;
                let pair = AdapterPair::new(a, b)?;
                if pair.rank() != rank {
                    return Err(Error::Format(format!(
                        "adapter {i} rank {} does not match declared {rank}",
                        pair.rank()
                    )));
                }
                Some(pair)
            }
            None => None,
        };
        layers.push(LinearLayer {
            weight,
            bias,
            activation: Activation::parse(&l.activation)?,
            frozen: l.frozen,
            quant_spec: l.quant.as_ref().map(|q| parse_quant(q)).transpose()?,
            adapter,
        });
    }
    if blocks.next().is_some() {
        return Err(Error::Format("extra blocks after last layer".into()));
    }
    let model = DenseModel {
        layers,
        surrogate_path: SurrogatePath::parse(&header.surrogate_path)?,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<DenseModel> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_adapters, AdapterPlan, LayerSelector};
    use crate::model::DenseModel;
    use crate::quant::fake_quantize_model;

    fn sample_model() -> DenseModel {
        DenseModel::new(&[6, 5, 4], Activation::Gelu, 42).unwrap()
    }

    #[test]
    fn float_roundtrip_is_exact() {
        let model = sample_model();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn quantized_roundtrip_stores_codes_and_is_exact() {
        let fmt = QuantFormat::new(QuantKind::Nf4, Granularity::PerChannel, Some(4)).unwrap();
        let model = fake_quantize_model(&sample_model(), &fmt);
        let bytes = model_to_bytes(&model).unwrap();
        // Codes (plus scales) are much smaller than raw FP64.
        let float_bytes = model_to_bytes(&sample_model()).unwrap();
        assert!(bytes.len() < float_bytes.len());
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn adapters_roundtrip() {
        let model = attach_adapters(
            &sample_model(),
            &AdapterPlan::new(2, LayerSelector::AllLinear),
            9,
        )
        .unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn save_is_deterministic() {
        let model = sample_model();
        assert_eq!(model_to_bytes(&model).unwrap(), model_to_bytes(&model).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = model_to_bytes(&sample_model()).unwrap();
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = model_to_bytes(&sample_model()).unwrap();
        // Corrupt the version string inside the JSON header.
        let needle = b"npp-ckpt-1";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos + 9] = b'2';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_nibble_is_an_integrity_error() {
        let fmt = QuantFormat::new(QuantKind::Fp4E2m1, Granularity::PerTensor, None).unwrap();
        let model = fake_quantize_model(&sample_model(), &fmt);
        let mut bytes = model_to_bytes(&model).unwrap();
        // The FP4 table has 15 entries, so nibble 15 is invalid. Force both
        // nibbles of the first code byte to 0xff.
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let payload_start = 8 + header_len + 8; // one per-tensor scale first
        bytes[payload_start] = 0xff;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Integrity(_))));
    }
}
