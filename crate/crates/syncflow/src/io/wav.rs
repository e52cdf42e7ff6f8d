//! RIFF/WAVE, PCM signed 16-bit little-endian, mono.

use std::path::Path;

use crate::codec::AudioWave;
use crate::error::{Error, Result};

/// Quantizes to i16 with round-half-away-from-zero and writes a canonical
/// 44-byte-header WAV file.
pub fn write_wav(y: &AudioWave, path: &Path) -> Result<()> {
    let n = y.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&y.sample_rate().to_le_bytes());
    buf.extend_from_slice(&(y.sample_rate() * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &v in y.samples() {
        let q = quantize(v);
        buf.extend_from_slice(&q.to_le_bytes());
    }
    super::atomic_write(path, &buf)
}

fn quantize(v: f32) -> i16 {
    let scaled = v * 32767.0;
    let rounded = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        (scaled - 0.5).ceil()
    };
    rounded.clamp(-32767.0, 32767.0) as i16
}

pub fn read_wav(path: &Path) -> Result<AudioWave> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([
            bytes[pos + 4],
            bytes[pos + 5],
            bytes[pos + 6],
            bytes[pos + 7],
        ]) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(Error::format(format!(
                "{}: truncated chunk {:?}",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt chunk too small".to_string()));
                }
                let body = &bytes[body_start..body_end];
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format("missing fmt chunk".to_string()))?;
    if format != 1 || bits != 16 {
        return Err(Error::format(format!(
            "unsupported encoding: format {format}, {bits}-bit (need PCM 16-bit)"
        )));
    }
    if channels != 1 {
        return Err(Error::format(format!(
            "unsupported channel count {channels} (need mono)"
        )));
    }
    let data = data.ok_or_else(|| Error::format("missing data chunk".to_string()))?;
    if data.len() % 2 != 0 {
        return Err(Error::format("odd data chunk length".to_string()));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32767.0)
        .collect();
    let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    AudioWave::new(samples, rate)
}
