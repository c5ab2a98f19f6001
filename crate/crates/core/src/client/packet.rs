//! Feature packets and their little-endian wire encoding.

use super::ClientError;
use crate::imaging::QualityTier;
use crate::privacy::PrivacyConfig;
use byteorder::{ByteOrder, LittleEndian};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `client_id u32 | round u16 | tier u8 | n_entries u32 | dim u16 | quant u8 | min f32 | max f32`
pub const HEADER_LEN: usize = 22;

const QUANT_NONE: u8 = 0;
const QUANT_INT8: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    None,
    Int8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Float(Vec<f32>),
    Int8 { min: f32, max: f32, codes: Vec<i8> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePacket {
    pub client_id: usize,
    pub round: usize,
    pub tier: QualityTier,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub payload: Payload,
    /// Wire size of the uncompressed packet holding every extracted entry.
    pub bytes_raw: u64,
    /// Exact length of [`FeaturePacket::encode`].
    pub bytes_wire: u64,
    pub compression_ratio: f64,
    pub eps_spent: f64,
    pub noised: bool,
    pub skipped: bool,
}

/// Wire length of an unquantized packet with `n` entries of `dim` floats.
pub fn float_wire_len(n: usize, dim: usize) -> u64 {
    (HEADER_LEN + n * (4 * dim + 1)) as u64
}

/// Wire length of an int8 packet with `n` entries of `dim` codes.
pub fn int8_wire_len(n: usize, dim: usize) -> u64 {
    (HEADER_LEN + n * (dim + 1)) as u64
}

impl FeaturePacket {
    /// Builds an unquantized packet. With privacy enabled, refuses features
    /// that did not pass through the Gaussian mechanism.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        client_id: usize,
        round: usize,
        tier: QualityTier,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<u8>,
        eps_spent: f64,
        noised: bool,
        privacy: &PrivacyConfig,
    ) -> Result<Self, ClientError> {
        if privacy.enabled && !noised && !labels.is_empty() {
            return Err(ClientError::UnnoisedUpload { client_id });
        }
        if features.len() != labels.len() * dim {
            return Err(ClientError::Corrupt(format!(
                "{} feature values for {} entries of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        let wire = float_wire_len(labels.len(), dim);
        Ok(Self {
            client_id,
            round,
            tier,
            dim,
            labels,
            payload: Payload::Float(features),
            bytes_raw: wire,
            bytes_wire: wire,
            compression_ratio: 1.0,
            eps_spent,
            noised,
            skipped: false,
        })
    }

    /// An empty packet marking a client that sat the round out.
    pub fn skip(client_id: usize, round: usize, tier: QualityTier, dim: usize) -> Self {
        let wire = float_wire_len(0, dim);
        Self {
            client_id,
            round,
            tier,
            dim,
            labels: Vec::new(),
            payload: Payload::Float(Vec::new()),
            bytes_raw: wire,
            bytes_wire: 0,
            compression_ratio: 0.0,
            eps_spent: 0.0,
            noised: false,
            skipped: true,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn quantization(&self) -> Quantization {
        match self.payload {
            Payload::Float(_) => Quantization::None,
            Payload::Int8 { .. } => Quantization::Int8,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.labels.len();
        let mut out = vec![0u8; HEADER_LEN];
        LittleEndian::write_u32(&mut out[0..4], self.client_id as u32);
        LittleEndian::write_u16(&mut out[4..6], self.round as u16);
        out[6] = self.tier.index() as u8;
        LittleEndian::write_u32(&mut out[7..11], n as u32);
        LittleEndian::write_u16(&mut out[11..13], self.dim as u16);
        match &self.payload {
            Payload::Float(values) => {
                out[13] = QUANT_NONE;
                let start = out.len();
                out.resize(start + 4 * values.len(), 0);
                LittleEndian::write_f32_into(values, &mut out[start..]);
            }
            Payload::Int8 { min, max, codes } => {
                out[13] = QUANT_INT8;
                LittleEndian::write_f32(&mut out[14..18], *min);
                LittleEndian::write_f32(&mut out[18..22], *max);
                out.extend(codes.iter().map(|c| *c as u8));
            }
        }
        out.extend_from_slice(&self.labels);
        out
    }

    /// Parses a wire packet. Accounting fields other than `bytes_wire` are
    /// not on the wire and come back zeroed.
    pub fn decode(bytes: &[u8]) -> Result<Self, ClientError> {
        let corrupt = |why: String| ClientError::Corrupt(why);
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let client_id = LittleEndian::read_u32(&bytes[0..4]) as usize;
        let round = LittleEndian::read_u16(&bytes[4..6]) as usize;
        let tier = QualityTier::from_index(bytes[6] as usize).ok_or_else(|| corrupt(format!("tier byte {}", bytes[6])))?;
        let n = LittleEndian::read_u32(&bytes[7..11]) as usize;
        let dim = LittleEndian::read_u16(&bytes[11..13]) as usize;
        let body = &bytes[HEADER_LEN..];
        let payload = match bytes[13] {
            QUANT_NONE => {
                if body.len() != n * (4 * dim + 1) {
                    return Err(corrupt(format!("float payload of {} bytes for {n}x{dim}", body.len())));
                }
                let mut values = vec![0f32; n * dim];
                LittleEndian::read_f32_into(&body[..4 * n * dim], &mut values);
                Payload::Float(values)
            }
            QUANT_INT8 => {
                if body.len() != n * (dim + 1) {
                    return Err(corrupt(format!("int8 payload of {} bytes for {n}x{dim}", body.len())));
                }
                let min = LittleEndian::read_f32(&bytes[14..18]);
                let max = LittleEndian::read_f32(&bytes[18..22]);
                if !(min.is_finite() && max.is_finite() && min <= max) {
                    return Err(corrupt(format!("bad scale header [{min}, {max}]")));
                }
                Payload::Int8 { min, max, codes: body[..n * dim].iter().map(|b| *b as i8).collect() }
            }
            other => return Err(corrupt(format!("unknown quantization byte {other}"))),
        };
        let labels = body[body.len() - n..].to_vec();
        Ok(Self {
            client_id,
            round,
            tier,
            dim,
            labels,
            payload,
            bytes_raw: 0,
            bytes_wire: bytes.len() as u64,
            compression_ratio: 0.0,
            eps_spent: 0.0,
            noised: false,
            skipped: false,
        })
    }
}

/// Affine int8 code: `round((x − min)/(max − min)·254) − 127`.
pub fn quantize(values: &[f32]) -> Payload {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() {
        return Payload::Int8 { min: 0.0, max: 0.0, codes: Vec::new() };
    }
    let range = (max - min) as f64;
    let codes = values
        .iter()
        .map(|v| {
            let unit = if range > 0.0 { (*v - min) as f64 / range } else { 0.0 };
            ((unit * 254.0).round() - 127.0) as i8
        })
        .collect();
    Payload::Int8 { min, max, codes }
}

/// Feature values of a packet as reals, `len() · dim` of them.
pub fn dequantize(packet: &FeaturePacket) -> Vec<f32> {
    match &packet.payload {
        Payload::Float(values) => values.clone(),
        Payload::Int8 { min, max, codes } => {
            let range = (*max - *min) as f64;
            codes
                .iter()
                .map(|c| (*min as f64 + (*c as f64 + 127.0) / 254.0 * range) as f32)
                .collect()
        }
    }
}

/// Number of int8 entries whose wire size comes closest to `target · bytes_raw`.
pub fn keep_count(n: usize, dim: usize, bytes_raw: u64, target: f64) -> usize {
    let budget = target * bytes_raw as f64 - HEADER_LEN as f64;
    let k = (budget / (dim + 1) as f64).round();
    (k.max(1.0) as usize).min(n)
}

/// Compresses toward `target` (wire bytes over raw bytes). Targets below 1
/// quantize to int8, which alone gives about 0.25; lower targets also keep a
/// seeded uniform subsample of the entries.
pub fn compress<R: Rng + ?Sized>(packet: &FeaturePacket, target: f64, rng: &mut R) -> Result<FeaturePacket, ClientError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(ClientError::Config(format!("compression target {target} outside (0, 1]")));
    }
    if target >= 1.0 || packet.skipped || packet.is_empty() {
        return Ok(packet.clone());
    }
    let values = dequantize(packet);
    let n = packet.len();
    let dim = packet.dim;
    let k = keep_count(n, dim, packet.bytes_raw, target);
    let mut keep: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    keep.sort_unstable();
    let mut kept_values = Vec::with_capacity(k * dim);
    let mut labels = Vec::with_capacity(k);
    for &i in &keep {
        kept_values.extend_from_slice(&values[i * dim..(i + 1) * dim]);
        labels.push(packet.labels[i]);
    }
    let mut out = FeaturePacket { labels, payload: quantize(&kept_values), ..packet.clone() };
    out.bytes_wire = int8_wire_len(k, dim);
    out.compression_ratio = out.bytes_wire as f64 / out.bytes_raw as f64;
    Ok(out)
}
