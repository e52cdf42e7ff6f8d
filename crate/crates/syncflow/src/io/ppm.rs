//! Video frames as binary PPM (P6, maxval 255), one file per frame with
//! zero-padded numeric filenames.

use std::path::Path;

use crate::codec::VideoTensor;
use crate::error::{Error, Result};

/// Writes `000.ppm`, `001.ppm`, ... into `dir` (created if needed).
pub fn write_frames(y: &VideoTensor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (y.height(), y.width());
    for f in 0..y.frames() {
        let mut buf = Vec::with_capacity(20 + h * w * 3);
        buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        for yy in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    let v = y.at(f, c, yy, xx);
                    buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        super::atomic_write(&dir.join(format!("{f:03}.ppm")), &buf)?;
    }
    Ok(())
}

/// Reads a frame directory back; frames must form a contiguous 000..N-1.
pub fn read_frames(dir: &Path) -> Result<VideoTensor> {
    let mut indices: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(format!("bad frame name {}", path.display())))?;
        let idx: usize = stem
            .parse()
            .map_err(|_| Error::format(format!("non-numeric frame name {stem}")))?;
        indices.push((idx, path));
    }
    if indices.is_empty() {
        return Err(Error::format(format!(
            "no .ppm frames in {}",
            dir.display()
        )));
    }
    indices.sort_by_key(|(i, _)| *i);
    for (want, (got, _)) in indices.iter().enumerate() {
        if *got != want {
            return Err(Error::format(format!("missing frame {want:03}")));
        }
    }

    let mut frames_data: Vec<f32> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (_, path) in &indices {
        let bytes = std::fs::read(path)?;
        let (w, h, payload) = parse_p6(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::format(format!(
                    "frame {} has size {w}x{h}, expected {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        // interleaved RGB rows -> planar channels
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    frames_data.push(payload[(yy * w + xx) * 3 + c] as f32 / 255.0);
                }
            }
        }
    }
    let (w, h) = dims.unwrap();
    VideoTensor::new(indices.len(), h, w, frames_data)
}

fn parse_p6(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    if token(bytes)? != "P6" {
        return Err("not a P6 file".to_string());
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err("truncated payload".to_string());
    }
    Ok((w, h, &bytes[pos..pos + need]))
}
