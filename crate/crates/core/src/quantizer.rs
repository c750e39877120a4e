//! Row-wise quantization: per-row scales and int8 / fp16 / fp32 payloads.
//!
//! A row `e` is stored as `e_q = rnd(e / scale)` and read back as
//! `scale * e_q`. Scales are kept as `f32` (the width they occupy on disk);
//! quantization and dequantization arithmetic runs in `f64` against that
//! stored value, so the nearest-rounding error is bounded by `scale / 2`.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INT8_MIN: i32 = -128;
pub const INT8_MAX: i32 = 127;
/// Largest finite half-precision value.
pub const FP16_MAX: f64 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionTier {
    Fp32,
    Fp16,
    Int8,
}

impl PrecisionTier {
    pub const ALL: [PrecisionTier; 3] = [PrecisionTier::Fp32, PrecisionTier::Fp16, PrecisionTier::Int8];

    /// Tag written in the precision byte of a row's extra word.
    pub fn tag(self) -> u8 {
        match self {
            PrecisionTier::Fp32 => 0,
            PrecisionTier::Fp16 => 1,
            PrecisionTier::Int8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PrecisionTier::Fp32),
            1 => Some(PrecisionTier::Fp16),
            2 => Some(PrecisionTier::Int8),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            PrecisionTier::Fp32 => 32,
            PrecisionTier::Fp16 => 16,
            PrecisionTier::Int8 => 8,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn payload_len(self, dim: usize) -> usize {
        self.bytes_per_value() * dim
    }
}

impl std::fmt::Display for PrecisionTier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrecisionTier::Fp32 => "FP32",
            PrecisionTier::Fp16 => "FP16",
            PrecisionTier::Int8 => "INT8",
        })
    }
}

/// Denominator used for the int8 scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// `max|e| / I_max`: the largest coordinate maps to ±127.
    #[default]
    Symmetric,
    /// `max|e| / (I_max - I_min)`: the largest coordinate maps to ±255 before
    /// clamping, so it always saturates.
    FullRange,
}

/// Serializable rounding choice; see [`RoundingMode`] for the stateful form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Nearest,
    #[default]
    Stochastic,
}

impl Rounding {
    pub fn into_mode(self, seed: u64) -> RoundingMode {
        match self {
            Rounding::Nearest => RoundingMode::Nearest,
            Rounding::Stochastic => RoundingMode::stochastic(seed),
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum RoundingMode {
    Nearest,
    /// Rounds `x` down with probability `ceil(x) - x`, up otherwise.
    Stochastic(ChaCha8Rng),
}

impl RoundingMode {
    pub fn stochastic(seed: u64) -> Self {
        RoundingMode::Stochastic(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn kind(&self) -> Rounding {
        match self {
            RoundingMode::Nearest => Rounding::Nearest,
            RoundingMode::Stochastic(_) => Rounding::Stochastic,
        }
    }

    /// Rounds to an integer-valued `f64`.
    pub fn round(&mut self, x: f64) -> f64 {
        match self {
            RoundingMode::Nearest => x.round(),
            RoundingMode::Stochastic(rng) => {
                let lo = x.floor();
                let frac = x - lo;
                if frac > 0.0 && rng.random::<f64>() < frac {
                    lo + 1.0
                } else {
                    lo
                }
            }
        }
    }

    /// Rounds to a half-precision value. Nearest uses round-half-to-even;
    /// stochastic picks one of the two adjacent representables with
    /// probability proportional to proximity.
    pub fn round_f16(&mut self, x: f64) -> f16 {
        let x = x.clamp(-FP16_MAX, FP16_MAX);
        let nearest = f16::from_f64(x);
        let rng = match self {
            RoundingMode::Nearest => return nearest,
            RoundingMode::Stochastic(rng) => rng,
        };
        let nv = nearest.to_f64();
        if nv == x {
            return nearest;
        }
        let (lo, hi) = if nv < x {
            (nearest, f16_next_up(nearest))
        } else {
            (f16_next_down(nearest), nearest)
        };
        let (lv, hv) = (lo.to_f64(), hi.to_f64());
        let p_up = (x - lv) / (hv - lv);
        if rng.random::<f64>() < p_up {
            hi
        } else {
            lo
        }
    }
}

fn f16_next_up(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits == 0x8000 || bits == 0 {
        return f16::from_bits(0x0001);
    }
    if bits & 0x8000 == 0 {
        f16::from_bits(bits + 1)
    } else {
        f16::from_bits(bits - 1)
    }
}

fn f16_next_down(h: f16) -> f16 {
    -f16_next_up(-h)
}

/// Quantized row contents, one variant per tier.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Vec<f32>),
    Fp16(Vec<f16>),
    Int8(Vec<i8>),
}

impl Payload {
    pub fn zeros(tier: PrecisionTier, dim: usize) -> Self {
        match tier {
            PrecisionTier::Fp32 => Payload::Fp32(vec![0.0; dim]),
            PrecisionTier::Fp16 => Payload::Fp16(vec![f16::ZERO; dim]),
            PrecisionTier::Int8 => Payload::Int8(vec![0; dim]),
        }
    }

    pub fn tier(&self) -> PrecisionTier {
        match self {
            Payload::Fp32(_) => PrecisionTier::Fp32,
            Payload::Fp16(_) => PrecisionTier::Fp16,
            Payload::Int8(_) => PrecisionTier::Int8,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Payload::Fp32(v) => v.len(),
            Payload::Fp16(v) => v.len(),
            Payload::Int8(v) => v.len(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.tier().payload_len(self.dim())
    }

    /// Little-endian encoding.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Payload::Fp32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Fp16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
    }

    /// Decodes `tier.payload_len(dim)` bytes; returns `None` on a length mismatch.
    pub fn read_le(tier: PrecisionTier, dim: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != tier.payload_len(dim) {
            return None;
        }
        Some(match tier {
            PrecisionTier::Fp32 => Payload::Fp32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            PrecisionTier::Fp16 => Payload::Fp16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            PrecisionTier::Int8 => Payload::Int8(bytes.iter().map(|&b| b as i8).collect()),
        })
    }
}

pub fn abs_max(row: &[f64]) -> f64 {
    row.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Per-row scale for `tier`. Zero for an all-zero row.
pub fn compute_scale(row: &[f64], tier: PrecisionTier, policy: ScalePolicy) -> Result<f32> {
    if let Some(x) = row.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("row contains {x}")));
    }
    let m = abs_max(row);
    if m == 0.0 {
        return Ok(0.0);
    }
    let scale = match tier {
        PrecisionTier::Fp32 => 1.0,
        PrecisionTier::Fp16 => (m / FP16_MAX).max(1.0),
        PrecisionTier::Int8 => match policy {
            ScalePolicy::Symmetric => m / f64::from(INT8_MAX),
            ScalePolicy::FullRange => m / f64::from(INT8_MAX - INT8_MIN),
        },
    };
    Ok(scale as f32)
}

pub fn quantize_row(row: &[f64], tier: PrecisionTier, scale: f32, mode: &mut RoundingMode) -> Payload {
    if tier == PrecisionTier::Fp32 {
        return Payload::Fp32(row.iter().map(|&x| x as f32).collect());
    }
    if scale == 0.0 {
        return Payload::zeros(tier, row.len());
    }
    let s = f64::from(scale);
    match tier {
        PrecisionTier::Int8 => Payload::Int8(
            row.iter()
                .map(|&x| {
                    let q = mode.round(x / s);
                    q.clamp(f64::from(INT8_MIN), f64::from(INT8_MAX)) as i8
                })
                .collect(),
        ),
        PrecisionTier::Fp16 => Payload::Fp16(row.iter().map(|&x| mode.round_f16(x / s)).collect()),
        PrecisionTier::Fp32 => unreachable!(),
    }
}

pub fn dequantize_row(payload: &Payload, tier: PrecisionTier, scale: f32) -> Result<Vec<f64>> {
    if payload.tier() != tier {
        return Err(Error::format(
            0,
            format!("payload is {} but tier is {tier}", payload.tier()),
        ));
    }
    let s = f64::from(scale);
    Ok(match payload {
        Payload::Fp32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        Payload::Fp16(v) => v.iter().map(|x| s * x.to_f64()).collect(),
        Payload::Int8(v) => v.iter().map(|&q| s * f64::from(q)).collect(),
    })
}

/// Scale + quantize in one call.
pub fn encode_row(
    row: &[f64],
    tier: PrecisionTier,
    policy: ScalePolicy,
    mode: &mut RoundingMode,
) -> Result<(f32, Payload)> {
    let scale = compute_scale(row, tier, policy)?;
    Ok((scale, quantize_row(row, tier, scale, mode)))
}
