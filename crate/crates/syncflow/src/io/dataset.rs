//! On-disk layout for datasets and generated samples.
//!
//! A sample directory holds `frames/NNN.ppm`, `audio.wav`, `caption.txt`,
//! and (for ground-truth data) an `impacts.json` sidecar. A split directory
//! holds numbered sample directories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{AudioWave, VideoTensor};
use crate::error::{Error, Result};
use crate::synthdata::{Dataset, MediaPair};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImpactSidecar {
    impact_frames: Vec<usize>,
    impact_times: Vec<f64>,
}

/// A sample read back from disk. `impact_frames`/`impact_times` are present
/// only when the sidecar exists (ground-truth data, not generated output).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub video: VideoTensor,
    pub audio: AudioWave,
    pub caption: String,
    pub impact_frames: Option<Vec<usize>>,
    pub impact_times: Option<Vec<f64>>,
}

pub fn write_sample_dir(
    dir: &Path,
    video: &VideoTensor,
    audio: &AudioWave,
    caption: &str,
    impacts: Option<(&[usize], &[f64])>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    super::write_frames(video, &dir.join("frames"))?;
    super::write_wav(audio, &dir.join("audio.wav"))?;
    super::atomic_write(&dir.join("caption.txt"), caption.as_bytes())?;
    if let Some((frames, times)) = impacts {
        let sidecar = ImpactSidecar {
            impact_frames: frames.to_vec(),
            impact_times: times.to_vec(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::format(format!("sidecar encode: {e}")))?;
        super::atomic_write(&dir.join("impacts.json"), json.as_bytes())?;
    }
    Ok(())
}

fn write_split(dir: &Path, pairs: &[MediaPair]) -> Result<()> {
    for (i, pair) in pairs.iter().enumerate() {
        write_sample_dir(
            &dir.join(format!("{i:05}")),
            &pair.video,
            &pair.audio,
            &pair.caption,
            Some((&pair.impact_frames, &pair.impact_times)),
        )?;
    }
    Ok(())
}

/// Write train/val/test under `out`.
pub fn write_splits(ds: &Dataset, out: &Path) -> Result<()> {
    write_split(&out.join("train"), &ds.train.pairs)?;
    write_split(&out.join("val"), &ds.val.pairs)?;
    write_split(&out.join("test"), &ds.test.pairs)?;
    Ok(())
}

/// Load every sample directory under `dir`, sorted by name. Also accepts a
/// single bare sample directory (one containing `frames/`).
pub fn load_split(dir: &Path) -> Result<Vec<LoadedSample>> {
    if dir.join("frames").is_dir() {
        return Ok(vec![load_sample_dir(dir)?]);
    }
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    if names.is_empty() {
        return Err(Error::format(format!(
            "no sample directories under {}",
            dir.display()
        )));
    }
    names.sort();
    names.iter().map(|n| load_sample_dir(&dir.join(n))).collect()
}

pub fn load_sample_dir(dir: &Path) -> Result<LoadedSample> {
    let video = super::read_frames(&dir.join("frames"))?;
    let audio = super::read_wav(&dir.join("audio.wav"))?;
    let caption = std::fs::read_to_string(dir.join("caption.txt"))
        .map_err(|_| Error::format(format!("missing caption.txt in {}", dir.display())))?
        .trim()
        .to_string();
    let sidecar_path = dir.join("impacts.json");
    let (impact_frames, impact_times) = if sidecar_path.exists() {
        let text = std::fs::read_to_string(&sidecar_path)?;
        let sidecar: ImpactSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("bad impacts.json: {e}")))?;
        (Some(sidecar.impact_frames), Some(sidecar.impact_times))
    } else {
        (None, None)
    };
    Ok(LoadedSample {
        video,
        audio,
        caption,
        impact_frames,
        impact_times,
    })
}
