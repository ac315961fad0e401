//! Functional simulator of a bitplane-wise separable in-memory crossbar.
//!
//! Inputs are applied column-wise and outputs read row-wise. Processing is
//! staged: weights and inputs are fixed-precision codes, each (input plane,
//! weight plane) product-sum collapses to a single comparator bit per row,
//! and plane outputs recombine with binary weights. Signed weights live in
//! separate positive and negative column groups whose comparator outputs are
//! subtracted. The exact comparator bypasses the 1-bit reduction and returns
//! the raw column count, which makes the forward path equal a signed integer
//! GEMM and serve as the oracle for every approximate mode.
//!
//! One (input plane, weight plane) pair is processed per cycle, so a forward
//! pass costs `input_bits * weight_bits` cycles; with 1-bit weight cells an
//! N-bit input needs exactly N cycles.

use crate::error::{Error, Result};
use crate::rng::substream_indexed;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// How a sumline count turns into a comparator output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// Return the raw count (no 1-bit quantization); the oracle mode.
    Exact,
    /// 1 when at least half of the active columns in the group discharge.
    Majority,
    /// 1 when the count clears a fixed reference (plus optional jitter).
    Threshold(u32),
}

impl Comparator {
    pub fn as_str(&self) -> String {
        match self {
            Comparator::Exact => "exact".into(),
            Comparator::Majority => "majority".into(),
            Comparator::Threshold(t) => format!("threshold:{t}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Comparator::Exact),
            "majority" => Ok(Comparator::Majority),
            other => {
                if let Some(t) = other.strip_prefix("threshold:") {
                    let t = t.parse().map_err(|_| {
                        Error::Config(format!("bad threshold value in {other:?}"))
                    })?;
                    Ok(Comparator::Threshold(t))
                } else {
                    Err(Error::Config(format!(
                        "comparator must be exact, majority or threshold:T, got {other:?}"
                    )))
                }
            }
        }
    }
}

/// Bit widths, comparator rule, and variability parameters of the array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitplaneConfig {
    /// Magnitude bits per weight cell (sign is a separate column-group rail).
    pub weight_bits: u32,
    /// Bits per input code.
    pub input_bits: u32,
    pub comparator: Comparator,
    /// Threshold jitter std in column counts, frozen per (row, cycle, rail).
    pub comparator_sigma: f64,
    /// Physical column count; rows compare at most this many columns.
    pub array_cols: usize,
    /// Seed of the jitter substreams.
    pub seed: u64,
}

impl BitplaneConfig {
    pub fn new(weight_bits: u32, input_bits: u32, comparator: Comparator, array_cols: usize) -> Result<Self> {
        let cfg = Self {
            weight_bits,
            input_bits,
            comparator,
            comparator_sigma: 0.0,
            array_cols,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_bits == 0 || self.weight_bits > 16 {
            return Err(Error::Config(format!(
                "weight_bits must be in [1, 16], got {}",
                self.weight_bits
            )));
        }
        if self.input_bits == 0 || self.input_bits > 16 {
            return Err(Error::Config(format!(
                "input_bits must be in [1, 16], got {}",
                self.input_bits
            )));
        }
        if self.comparator_sigma < 0.0 || !self.comparator_sigma.is_finite() {
            return Err(Error::Config(format!(
                "comparator_sigma must be finite and >= 0, got {}",
                self.comparator_sigma
            )));
        }
        if let Comparator::Threshold(t) = self.comparator {
            if t as usize > self.array_cols {
                return Err(Error::Config(format!(
                    "threshold {t} exceeds array_cols {}",
                    self.array_cols
                )));
            }
        }
        Ok(())
    }
}

/// Packed bit vector over the array columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    words: Vec<u64>,
    len: usize,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        if bit {
            self.words[i / 64] |= 1u64 << (i % 64);
        } else {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// popcount(self AND other).
    pub fn and_popcount(&self, other: &BitPlane) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

}

/// Split unsigned codes into bit planes, least significant first. The planes
/// reconstruct the codes exactly: code = sum_i 2^i * plane_i.
pub fn bitplane_decompose(codes: &[u32], nbits: u32) -> Result<Vec<BitPlane>> {
    if nbits == 0 || nbits > 32 {
        return Err(Error::Argument(format!("nbits {nbits} out of range")));
    }
    if let Some((ix, &bad)) = codes
        .iter()
        .enumerate()
        .find(|(_, &c)| u64::from(c) >= 1u64 << nbits)
    {
        return Err(Error::Argument(format!(
            "code {bad} at index {ix} overflows {nbits} bits"
        )));
    }
    let mut planes = vec![BitPlane::zeros(codes.len()); nbits as usize];
    for (i, &c) in codes.iter().enumerate() {
        for (j, plane) in planes.iter_mut().enumerate() {
            plane.set(i, (c >> j) & 1 == 1);
        }
    }
    Ok(planes)
}

fn comparator_output(s: u32, active: u32, comparator: &Comparator, jitter: f64) -> u32 {
    // No active columns: neither rail discharges; break toward 0.
    if active == 0 {
        return 0;
    }
    match comparator {
        Comparator::Exact => s,
        Comparator::Majority => u32::from(s >= active.div_ceil(2)),
        Comparator::Threshold(t) => u32::from(f64::from(s) >= f64::from(*t) + jitter),
    }
}

/// Compare one weight plane against one input plane. Exact mode returns the
/// AND-popcount itself; the 1-bit modes return 0 or 1. `jitter` offsets the
/// threshold reference (pass 0.0 when variability is off).
pub fn row_compare(w_plane: &BitPlane, x_plane: &BitPlane, comparator: &Comparator, jitter: f64) -> Result<u32> {
    if w_plane.len() != x_plane.len() {
        return Err(Error::Dimension(format!(
            "row_compare of lengths {} and {}",
            w_plane.len(),
            x_plane.len()
        )));
    }
    let s = w_plane.and_popcount(x_plane);
    let active = x_plane.popcount();
    Ok(comparator_output(s, active, comparator, jitter))
}

/// Crossbar storing unsigned magnitude codes with a per-cell sign rail.
/// Weights map a D-wide input to H outputs; cell (h, d) holds the magnitude
/// of weight (d, h).
#[derive(Debug, Clone)]
pub struct CrossbarLayer {
    /// Row-major by output row: mags[h * in_dim + d].
    mags: Vec<u32>,
    /// True where the weight is negative.
    negative: Vec<bool>,
    in_dim: usize,
    out_dim: usize,
}

impl CrossbarLayer {
    pub fn new(in_dim: usize, out_dim: usize, mags: Vec<u32>, negative: Vec<bool>) -> Result<Self> {
        if mags.len() != in_dim * out_dim || negative.len() != mags.len() {
            return Err(Error::Dimension(format!(
                "crossbar {out_dim}x{in_dim} needs {} cells, got {} mags / {} signs",
                in_dim * out_dim,
                mags.len(),
                negative.len()
            )));
        }
        Ok(Self {
            mags,
            negative,
            in_dim,
            out_dim,
        })
    }

    /// Symmetric quantization of a real D x H weight matrix into magnitude
    /// codes of `weight_bits` bits plus signs. Returns the layer and the
    /// scale such that weight ~ sign * mag * scale / (2^bits - 1).
    pub fn from_weights(weights: &Tensor, weight_bits: u32) -> Result<(Self, f64)> {
        if !weights.is_2d() {
            return Err(Error::Dimension("crossbar weights must be 2-D".into()));
        }
        let (d, h) = (weights.rows(), weights.cols());
        let qmax = f64::from((1u32 << weight_bits) - 1);
        let mut scale = weights.max_abs();
        if scale == 0.0 {
            scale = 1.0;
        }
        let mut mags = vec![0u32; d * h];
        let mut negative = vec![false; d * h];
        for row in 0..h {
            for col in 0..d {
                let w = weights.data()[col * h + row];
                mags[row * d + col] = (w.abs() / scale * qmax).round_ties_even() as u32;
                negative[row * d + col] = w < 0.0;
            }
        }
        Ok((Self::new(d, h, mags, negative)?, scale / qmax))
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn max_code(&self) -> u32 {
        self.mags.iter().copied().max().unwrap_or(0)
    }

    /// Signed integer matrix-vector product; the reference the exact
    /// comparator must reproduce.
    pub fn signed_gemm(&self, x_codes: &[u32]) -> Vec<i64> {
        let mut y = vec![0i64; self.out_dim];
        for (row, yv) in y.iter_mut().enumerate() {
            let base = row * self.in_dim;
            let mut acc = 0i64;
            for (col, &x) in x_codes.iter().enumerate() {
                let m = i64::from(self.mags[base + col]) * i64::from(x);
                acc += if self.negative[base + col] { -m } else { m };
            }
            *yv = acc;
        }
        y
    }
}

fn jitter_for(cfg: &BitplaneConfig, row: usize, cycle: u32, rail: u32) -> f64 {
    if cfg.comparator_sigma == 0.0 {
        return 0.0;
    }
    let mut rng = substream_indexed(
        cfg.seed,
        "cim.jitter",
        &[row as u64, u64::from(cycle), u64::from(rail)],
    );
    Normal::new(0.0, cfg.comparator_sigma)
        .expect("validated sigma")
        .sample(&mut rng)
}

struct ForwardDetail {
    y: Vec<i64>,
    cycles: u64,
    /// Comparator outputs in (row, cycle, rail) order; empty in exact mode.
    bits: Vec<u8>,
}

fn forward_detail(layer: &CrossbarLayer, x_codes: &[u32], cfg: &BitplaneConfig) -> Result<ForwardDetail> {
    cfg.validate()?;
    if x_codes.len() != layer.in_dim {
        return Err(Error::Dimension(format!(
            "input of length {} against a {}-column crossbar",
            x_codes.len(),
            layer.in_dim
        )));
    }
    if layer.in_dim > cfg.array_cols {
        return Err(Error::Config(format!(
            "layer needs {} columns but array_cols is {}",
            layer.in_dim, cfg.array_cols
        )));
    }
    if u64::from(layer.max_code()) >= 1u64 << cfg.weight_bits {
        return Err(Error::Argument(format!(
            "weight code {} overflows {} bits",
            layer.max_code(),
            cfg.weight_bits
        )));
    }
    let x_planes = bitplane_decompose(x_codes, cfg.input_bits)?;
    let n_w = cfg.weight_bits;
    let n_x = cfg.input_bits;
    let collect_bits = !matches!(cfg.comparator, Comparator::Exact);
    let mut bits = Vec::new();

    let mut y = vec![0i64; layer.out_dim];
    let mut rail_planes = [BitPlane::zeros(layer.in_dim), BitPlane::zeros(layer.in_dim)];
    let mut w_plane = BitPlane::zeros(layer.in_dim);
    for (row, yv) in y.iter_mut().enumerate() {
        let base = row * layer.in_dim;
        // Rail masks: columns partitioned by weight sign.
        for col in 0..layer.in_dim {
            let neg = layer.negative[base + col];
            rail_planes[0].set(col, !neg);
            rail_planes[1].set(col, neg);
        }
        let mut acc = 0i64;
        for i in 0..n_x {
            for j in 0..n_w {
                let cycle = i * n_w + j;
                for (rail, rail_mask) in rail_planes.iter().enumerate() {
                    for col in 0..layer.in_dim {
                        let m = layer.mags[base + col];
                        w_plane.set(col, (m >> j) & 1 == 1 && rail_mask.get(col));
                    }
                    let s = w_plane.and_popcount(&x_planes[i as usize]);
                    let active = x_planes[i as usize].and_popcount(rail_mask);
                    let jitter = jitter_for(cfg, row, cycle, rail as u32);
                    let out = comparator_output(s, active, &cfg.comparator, jitter);
                    if collect_bits {
                        bits.push(out as u8);
                    }
                    let signed = if rail == 0 {
                        i64::from(out)
                    } else {
                        -i64::from(out)
                    };
                    acc += signed << (i + j);
                }
            }
        }
        *yv = acc;
    }
    Ok(ForwardDetail {
        y,
        cycles: u64::from(n_x) * u64::from(n_w),
        bits,
    })
}

/// Run the crossbar on one input vector of codes. Returns the per-row
/// outputs and the cycle count `input_bits * weight_bits`.
pub fn crossbar_forward(layer: &CrossbarLayer, x_codes: &[u32], cfg: &BitplaneConfig) -> Result<(Vec<i64>, u64)> {
    let detail = forward_detail(layer, x_codes, cfg)?;
    Ok((detail.y, detail.cycles))
}

/// Fidelity of an approximate configuration against the exact-comparator
/// reference over a dataset of input vectors.
#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    /// RMSE(approx, exact) / RMS(exact); NaN when the exact output is all
    /// zero (see `exact_all_zero`).
    pub nrmse: f64,
    /// Fraction of comparator outputs that differ from their zero-jitter
    /// values (0 for exact and majority modes).
    pub bit_flip_rate: f64,
    pub exact_all_zero: bool,
}

pub fn fidelity_report(layer: &CrossbarLayer, inputs: &[Vec<u32>], cfg: &BitplaneConfig) -> Result<FidelityReport> {
    if inputs.is_empty() {
        return Err(Error::Argument("empty input dataset".into()));
    }
    let exact_cfg = BitplaneConfig {
        comparator: Comparator::Exact,
        comparator_sigma: 0.0,
        ..cfg.clone()
    };
    let quiet_cfg = BitplaneConfig {
        comparator_sigma: 0.0,
        ..cfg.clone()
    };
    let mut se = 0.0f64;
    let mut ref_sq = 0.0f64;
    let mut flips = 0u64;
    let mut total_bits = 0u64;
    for x in inputs {
        let approx = forward_detail(layer, x, cfg)?;
        let exact = forward_detail(layer, x, &exact_cfg)?;
        for (a, e) in approx.y.iter().zip(&exact.y) {
            let d = (*a - *e) as f64;
            se += d * d;
            ref_sq += (*e as f64) * (*e as f64);
        }
        if cfg.comparator_sigma > 0.0 && !approx.bits.is_empty() {
            let quiet = forward_detail(layer, x, &quiet_cfg)?;
            flips += approx
                .bits
                .iter()
                .zip(&quiet.bits)
                .filter(|(a, q)| a != q)
                .count() as u64;
            total_bits += approx.bits.len() as u64;
        } else {
            total_bits += approx.bits.len() as u64;
        }
    }
    let exact_all_zero = ref_sq == 0.0;
    let nrmse = if exact_all_zero {
        f64::NAN
    } else {
        (se / ref_sq).sqrt()
    };
    let bit_flip_rate = if total_bits == 0 {
        0.0
    } else {
        flips as f64 / total_bits as f64
    };
    Ok(FidelityReport {
        nrmse,
        bit_flip_rate,
        exact_all_zero,
    })
}
