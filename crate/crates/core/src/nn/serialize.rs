use super::{ModelParams, Network, NnError, ParamEntry, Scalar};
use byteorder::{ByteOrder, LittleEndian};

const MAGIC: &[u8; 4] = b"QPRM";

/// Encodes parameters as `MAGIC | manifest_len u32 | manifest JSON | f32 values | f32 buffers`,
/// little-endian throughout.
pub fn serialize_params<T: Scalar>(net: &Network, params: &ModelParams<T>) -> Vec<u8> {
    let manifest = serde_json::to_vec(net.manifest()).expect("manifest serializes");
    let n = params.values.len() + params.buffers.len();
    let mut out = Vec::with_capacity(8 + manifest.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    let mut len = [0u8; 4];
    LittleEndian::write_u32(&mut len, manifest.len() as u32);
    out.extend_from_slice(&len);
    out.extend_from_slice(&manifest);
    let mut word = [0u8; 4];
    for v in params.values.iter().chain(&params.buffers) {
        LittleEndian::write_f32(&mut word, v.to_f32().unwrap_or(f32::NAN));
        out.extend_from_slice(&word);
    }
    out
}

/// Exact byte length of `serialize_params` for this network.
pub fn serialized_len(net: &Network) -> usize {
    let manifest = serde_json::to_vec(net.manifest()).expect("manifest serializes");
    8 + manifest.len() + 4 * (net.param_count() + net.buffer_count())
}

/// Serialized size in MiB, compared against a device's model-size limit.
pub fn serialized_mb(net: &Network) -> f64 {
    serialized_len(net) as f64 / (1u64 << 20) as f64
}

pub fn deserialize_params(net: &Network, bytes: &[u8]) -> Result<ModelParams<f32>, NnError> {
    let corrupt = |why: &str| NnError::Corrupt(why.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing parameter magic"));
    }
    let mlen = LittleEndian::read_u32(&bytes[4..8]) as usize;
    let body = bytes.get(8..8 + mlen).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Vec<ParamEntry> = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if manifest != net.manifest() {
        return Err(corrupt("manifest does not match the network"));
    }
    let data = &bytes[8 + mlen..];
    let (np, nb) = (net.param_count(), net.buffer_count());
    if data.len() != 4 * (np + nb) {
        return Err(corrupt("payload length does not match the manifest"));
    }
    let mut all = vec![0f32; np + nb];
    LittleEndian::read_f32_into(data, &mut all);
    let buffers = all.split_off(np);
    Ok(ModelParams { values: all, buffers })
}
