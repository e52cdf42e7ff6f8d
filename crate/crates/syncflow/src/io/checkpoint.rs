//! Checkpoint container: model parameters, optimizer state, codec and tower
//! configs, stage history, and RNG state — everything needed to resume
//! training bit-exactly.
//!
//! Layout: magic "SYCK", version u16 LE, u32 LE JSON header length, the
//! JSON header, then tensor blobs in a fixed order (parameters in
//! registration order, then Adam m/v when present, then codec VAE tensors
//! when present). Tensors use the SYTF encoding.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{BlockVae, Codec, CodecConfig, CodecMode, VaeParams};
use crate::ddit::{DualDit, TowerConfig};
use crate::error::{Error, Result};
use crate::io::{read_tensor_from, write_tensor_to};
use crate::numerics::SplitMix64;
use crate::training::{AdamState, StageRecord, TrainState};

const MAGIC: &[u8; 4] = b"SYCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tower: TowerConfig,
    codec: CodecConfig,
    stage_history: Vec<StageRecord>,
    rng_state: u64,
    step_in_stage: u64,
    adam_step: u64,
    has_adam: bool,
    param_names: Vec<String>,
    vocab: Vec<String>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub model: DualDit,
    pub codec: Codec,
    pub state: TrainState,
}

pub fn save_checkpoint(
    path: &Path,
    model: &DualDit,
    codec: &Codec,
    state: &TrainState,
) -> Result<()> {
    let header = Header {
        tower: model.cfg.clone(),
        codec: codec.cfg.clone(),
        stage_history: state.stage_history.clone(),
        rng_state: state.rng.state(),
        step_in_stage: state.step_in_stage,
        adam_step: state.adam.step,
        has_adam: true,
        param_names: model
            .store
            .entries()
            .map(|(_, e)| e.name.clone())
            .collect(),
        vocab: (0..model.text.vocab.len())
            .map(|i| model.text.vocab.word(i).unwrap_or("").to_string())
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(format!("header: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, e) in model.store.entries() {
        write_tensor_to(&mut buf, &e.value)?;
    }
    for m in &state.adam.m {
        write_tensor_to(&mut buf, m)?;
    }
    for v in &state.adam.v {
        write_tensor_to(&mut buf, v)?;
    }
    if let Some(vae) = &codec.vae {
        for t in vae_tensors(vae) {
            write_tensor_to(&mut buf, t)?;
        }
    }
    super::atomic_write(path, &buf)
}

fn vae_tensors(vae: &VaeParams) -> [&crate::numerics::Tensor; 8] {
    [
        &vae.video.enc_w,
        &vae.video.enc_b,
        &vae.video.dec_w,
        &vae.video.dec_b,
        &vae.audio.enc_w,
        &vae.audio.enc_b,
        &vae.audio.dec_w,
        &vae.audio.dec_b,
    ]
}

/// Load a checkpoint. When `expect_tower` is given, a mismatch with the
/// stored configuration is a config error.
pub fn load_checkpoint(path: &Path, expect_tower: Option<&TowerConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut r = std::io::Cursor::new(&bytes[..]);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated checkpoint (magic)".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut vbuf = [0u8; 2];
    r.read_exact(&mut vbuf)
        .map_err(|_| Error::format("truncated checkpoint (version)".to_string()))?;
    let version = u16::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} not supported (expected {VERSION})"
        )));
    }
    let mut lbuf = [0u8; 4];
    r.read_exact(&mut lbuf)
        .map_err(|_| Error::format("truncated checkpoint (header length)".to_string()))?;
    let json_len = u32::from_le_bytes(lbuf) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::format("truncated checkpoint (header)".to_string()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::format(format!("header: {e}")))?;

    if let Some(expect) = expect_tower {
        if *expect != header.tower {
            return Err(Error::config(
                "checkpoint tower configuration does not match the requested one".to_string(),
            ));
        }
    }

    let mut model = DualDit::new(header.tower.clone())?;
    if model.store.len() != header.param_names.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model defines {}",
            header.param_names.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.entries().map(|(id, _)| id).collect();
    for (i, id) in ids.iter().enumerate() {
        let t = read_tensor_from(&mut r)
            .map_err(|e| Error::format(format!("parameter {} ({e})", header.param_names[i])))?;
        let slot = model.store.get_mut(*id);
        if t.shape() != slot.shape() {
            return Err(Error::format(format!(
                "parameter {} has shape {:?}, expected {:?}",
                header.param_names[i],
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }

    let mut adam = AdamState::new(&model);
    adam.step = header.adam_step;
    if header.has_adam {
        for slot in adam.m.iter_mut() {
            *slot = read_tensor_from(&mut r)
                .map_err(|e| Error::format(format!("adam m: {e}")))?;
        }
        for slot in adam.v.iter_mut() {
            *slot = read_tensor_from(&mut r)
                .map_err(|e| Error::format(format!("adam v: {e}")))?;
        }
    }

    let mut codec = Codec::new(header.codec.clone())?;
    if header.codec.mode == CodecMode::TrainedVae {
        let vae = codec.vae.as_mut().expect("trained-vae mode has params");
        for slot in vae_slots(vae) {
            *slot = read_tensor_from(&mut r)
                .map_err(|e| Error::format(format!("codec vae: {e}")))?;
        }
    }

    let pos = r.position() as usize;
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - pos
        )));
    }

    let state = TrainState {
        adam,
        rng: SplitMix64::from_state(header.rng_state),
        step_in_stage: header.step_in_stage,
        stage_history: header.stage_history,
    };
    Ok(Checkpoint {
        model,
        codec,
        state,
    })
}

fn vae_slots(vae: &mut VaeParams) -> [&mut crate::numerics::Tensor; 8] {
    fn four(b: &mut BlockVae) -> [&mut crate::numerics::Tensor; 4] {
        [&mut b.enc_w, &mut b.enc_b, &mut b.dec_w, &mut b.dec_b]
    }
    let [a, b, c, d] = four(&mut vae.video);
    let [e, f, g, h] = four(&mut vae.audio);
    [a, b, c, d, e, f, g, h]
}
