//! 8-bit μ-law companding of 16-bit PCM audio.
//!
//! Samples are mapped through `sgn(x)·ln(1 + μ|x|)/ln(1 + μ)` with `μ = 255`
//! and quantized to 256 uniform levels, giving one byte per sample.

const MU: f64 = 255.0;

pub fn encode_sample(s: i16) -> u8 {
    let x = f64::from(s) / 32768.0;
    let y = x.signum() * (MU * x.abs()).ln_1p() / MU.ln_1p();
    ((y + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn decode_sample(b: u8) -> i16 {
    let y = f64::from(b) / 255.0 * 2.0 - 1.0;
    let x = y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU;
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Little-endian signed 16-bit PCM to μ-law bytes; a trailing odd byte is
/// ignored.
pub fn encode_pcm(pcm: &[u8]) -> Vec<u8> {
    pcm.chunks_exact(2)
        .map(|c| encode_sample(i16::from_le_bytes([c[0], c[1]])))
        .collect()
}

pub fn decode_pcm(bytes: &[u8]) -> Vec<u8> {
    bytes
        .iter()
        .flat_map(|&b| decode_sample(b).to_le_bytes())
        .collect()
}
