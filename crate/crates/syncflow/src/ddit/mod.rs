//! The dual-tower diffusion transformer.
//!
//! A video tower processes video latents with factorized spatial/temporal
//! attention and text cross-attention; an audio tower processes audio
//! latents and cross-attends, layer by layer, to the video tower's
//! temporal-attention outputs after they pass through a per-layer modality
//! adaptor, concatenated with a timestep-embedding token. Information flows
//! from video to audio only; nothing flows back.
//!
//! The video tower uses pre-norm residual blocks with timestep conditioning
//! via adaptive layer-norm modulation; the audio tower applies layer
//! normalization after each transformation (post-norm) with the timestep
//! entering as an extra cross-attention token.

pub mod attention;
pub mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::codec::{AudioLatent, VideoLatent};
use crate::ddit::attention::{sinusoid_features, LayerNormIds, LinearIds, MhaIds, MlpIds};
use crate::ddit::params::{GParamStore, ParamGroup, ParamId, Session};
use crate::error::{Error, Result};
use crate::numerics::{GTensor, Scalar, SplitMix64, Tensor, Var};
use crate::text::{TextCondition, TextEncoder, Vocab};

const CONV_K: usize = 3; // 3x3x3 kernel, padding 1, stride 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerConfig {
    /// Shared layer count: the towers run the same number of layers in
    /// parallel, so audio layer l is conditioned by video layer l.
    pub layers: usize,
    pub e_v: usize,
    pub e_a: usize,
    pub n_heads: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Pass video features through the per-layer adaptor (ablation flag).
    #[serde(default = "default_true")]
    pub use_adaptor: bool,
    /// Feed text to the audio tower's cross-attention in the joint model.
    #[serde(default)]
    pub audio_text_cond: bool,
    /// Audio-only ablation: no video tower, audio conditions on text + t.
    #[serde(default)]
    pub audio_only: bool,
    /// Video latent channels (from the codec).
    pub video_channels: usize,
    /// Video latent frames at training time.
    pub t_v: usize,
    /// Video latent spatial dims at training time.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Audio latent width and frame count.
    pub d_a: usize,
    pub t_a: usize,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

fn default_patch() -> usize {
    2
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_init_seed() -> u64 {
    0x0D17
}

impl TowerConfig {
    /// Desk-scale default over the desk codec: 4 layers, width 64, 4 heads.
    pub fn desk() -> TowerConfig {
        TowerConfig {
            layers: 4,
            e_v: 64,
            e_a: 64,
            n_heads: 4,
            patch: 2,
            mlp_ratio: 4,
            use_adaptor: true,
            audio_text_cond: false,
            audio_only: false,
            video_channels: 192,
            t_v: 4,
            grid_h: 8,
            grid_w: 8,
            d_a: 160,
            t_a: 100,
            init_seed: default_init_seed(),
        }
    }

    /// Paper-scale preset (28 layers, width 1142, 16 heads), stored for
    /// reference. Note 1142 is not divisible by 16, so this preset cannot
    /// be instantiated as-is; it records the published configuration.
    pub fn paper() -> TowerConfig {
        TowerConfig {
            layers: 28,
            e_v: 1142,
            e_a: 1142,
            n_heads: 16,
            patch: 2,
            mlp_ratio: 4,
            use_adaptor: true,
            audio_text_cond: false,
            audio_only: false,
            video_channels: 3 * 4 * 8 * 8,
            t_v: 8,
            grid_h: 32,
            grid_w: 32,
            d_a: 1142,
            t_a: 100,
            init_seed: default_init_seed(),
        }
    }

    /// Minimal configuration for gradient checks: 1 layer, width 16.
    pub fn tiny() -> TowerConfig {
        TowerConfig {
            layers: 1,
            e_v: 16,
            e_a: 16,
            n_heads: 2,
            patch: 2,
            mlp_ratio: 2,
            use_adaptor: true,
            audio_text_cond: false,
            audio_only: false,
            video_channels: 4,
            t_v: 2,
            grid_h: 4,
            grid_w: 4,
            d_a: 8,
            t_a: 8,
            init_seed: default_init_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("towers need at least one layer".to_string()));
        }
        if self.e_v % self.n_heads != 0 || self.e_a % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed dims ({}, {}) must be divisible by head count {}",
                self.e_v, self.e_a, self.n_heads
            )));
        }
        if self.grid_h % self.patch != 0 || self.grid_w % self.patch != 0 {
            return Err(Error::config(format!(
                "latent grid {}x{} not divisible by patch {}",
                self.grid_h, self.grid_w, self.patch
            )));
        }
        if !self.use_adaptor && self.e_v != self.e_a {
            return Err(Error::config(
                "bypassing the adaptor requires e_v == e_a".to_string(),
            ));
        }
        if self.e_a % 2 != 0 || self.e_v % 2 != 0 {
            return Err(Error::config("embed dims must be even".to_string()));
        }
        Ok(())
    }

    fn spatial_tokens(&self) -> usize {
        (self.grid_h / self.patch) * (self.grid_w / self.patch)
    }
}

/// Per-modality velocity predictions, shaped like the input latents.
#[derive(Debug, Clone)]
pub struct DualVelocity {
    /// `[B, T_v, C, H', W']`.
    pub video: Tensor,
    /// `[B, T_a, D_A]`.
    pub audio: Tensor,
}

impl DualVelocity {
    /// Extract one batch item as latents.
    pub fn item(&self, i: usize) -> (VideoLatent, AudioLatent) {
        let vs = self.video.shape();
        let per_v: usize = vs[1..].iter().product();
        let video = Tensor::from_parts(
            vs[1..].to_vec(),
            self.video.data()[i * per_v..(i + 1) * per_v].to_vec(),
        );
        let as_ = self.audio.shape();
        let per_a: usize = as_[1..].iter().product();
        let audio = Tensor::from_parts(
            as_[1..].to_vec(),
            self.audio.data()[i * per_a..(i + 1) * per_a].to_vec(),
        );
        (VideoLatent(video), AudioLatent(audio))
    }
}

struct VideoLayerIds {
    t_head: LinearIds,
    ln_sp: LayerNormIds,
    attn_sp: MhaIds,
    ln_xsp: LayerNormIds,
    cross_sp: MhaIds,
    ln_tmp: LayerNormIds,
    attn_tmp: MhaIds,
    ln_xtmp: LayerNormIds,
    cross_tmp: MhaIds,
}

struct VideoTowerIds {
    conv_w: ParamId,
    conv_b: ParamId,
    patch_merge: LinearIds,
    pos_t: ParamId,
    pos_s: ParamId,
    t_trunk: LinearIds,
    layers: Vec<VideoLayerIds>,
    final_ln: LayerNormIds,
    head: LinearIds,
}

struct AudioLayerIds {
    attn: MhaIds,
    ln1: LayerNormIds,
    cross: MhaIds,
    ln2: LayerNormIds,
    mlp: MlpIds,
    ln3: LayerNormIds,
}

struct AudioTowerIds {
    embed: LinearIds,
    pos: ParamId,
    t_mlp1: LinearIds,
    t_mlp2: LinearIds,
    text_proj: LinearIds,
    layers: Vec<AudioLayerIds>,
    final_ln: LayerNormIds,
    head: LinearIds,
}

struct AdaptorIds {
    attn: MhaIds,
    ln: LayerNormIds,
    proj: LinearIds,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum MapKey {
    Im2col(usize, usize, usize, usize),
    PatchSplit(usize, usize, usize, usize),
    Unpatch(usize, usize, usize, usize),
    PosRepeatT(usize, usize),
    PosRepeatS(usize, usize),
}

/// The full model: both towers, adaptors, and the text encoder, all backed
/// by one grouped parameter store. Production code uses the `f32`
/// instantiation ([`DualDit`]); gradient-check oracles widen to `f64`.
pub struct GDualDit<T: Scalar = f32> {
    pub cfg: TowerConfig,
    pub store: GParamStore<T>,
    pub text: TextEncoder,
    video: VideoTowerIds,
    audio: AudioTowerIds,
    adaptors: Vec<AdaptorIds>,
    maps: RefCell<HashMap<MapKey, Rc<Vec<u32>>>>,
}

pub type DualDit = GDualDit<f32>;

impl<T: Scalar> GDualDit<T> {
    pub fn new(cfg: TowerConfig) -> Result<GDualDit<T>> {
        cfg.validate()?;
        let mut store = GParamStore::<T>::new();
        let mut rng = SplitMix64::new(cfg.init_seed);

        let text = TextEncoder::init(&mut store, Vocab::synthetic(), cfg.e_v, cfg.n_heads, &mut rng);

        let gv = ParamGroup::VideoTower;
        let conv_in = cfg.video_channels * CONV_K * CONV_K * CONV_K;
        let s_tokens = cfg.spatial_tokens();
        let p2 = cfg.patch * cfg.patch;
        let video = VideoTowerIds {
            conv_w: store.register(
                "video.conv.w",
                gv,
                GTensor::randn(&[conv_in, cfg.e_v], 0.02, &mut rng),
            ),
            conv_b: store.register("video.conv.b", gv, GTensor::zeros(&[cfg.e_v])),
            patch_merge: LinearIds::init(
                &mut store,
                "video.patch_merge",
                gv,
                p2 * cfg.e_v,
                cfg.e_v,
                &mut rng,
            ),
            pos_t: store.register(
                "video.pos_t",
                gv,
                GTensor::randn(&[cfg.t_v, cfg.e_v], 0.02, &mut rng),
            ),
            pos_s: store.register(
                "video.pos_s",
                gv,
                GTensor::randn(&[s_tokens, cfg.e_v], 0.02, &mut rng),
            ),
            t_trunk: LinearIds::init(&mut store, "video.t_trunk", gv, cfg.e_v, cfg.e_v, &mut rng),
            layers: (0..cfg.layers)
                .map(|l| VideoLayerIds {
                    t_head: LinearIds::init_zero(
                        &mut store,
                        &format!("video.l{l}.t_head"),
                        gv,
                        cfg.e_v,
                        4 * cfg.e_v,
                    ),
                    ln_sp: LayerNormIds::init(&mut store, &format!("video.l{l}.ln_sp"), gv, cfg.e_v),
                    attn_sp: MhaIds::init(
                        &mut store,
                        &format!("video.l{l}.attn_sp"),
                        gv,
                        cfg.e_v,
                        cfg.e_v,
                        cfg.n_heads,
                        &mut rng,
                    ),
                    ln_xsp: LayerNormIds::init(&mut store, &format!("video.l{l}.ln_xsp"), gv, cfg.e_v),
                    cross_sp: MhaIds::init(
                        &mut store,
                        &format!("video.l{l}.cross_sp"),
                        gv,
                        cfg.e_v,
                        cfg.e_v,
                        cfg.n_heads,
                        &mut rng,
                    ),
                    ln_tmp: LayerNormIds::init(&mut store, &format!("video.l{l}.ln_tmp"), gv, cfg.e_v),
                    attn_tmp: MhaIds::init(
                        &mut store,
                        &format!("video.l{l}.attn_tmp"),
                        gv,
                        cfg.e_v,
                        cfg.e_v,
                        cfg.n_heads,
                        &mut rng,
                    ),
                    ln_xtmp: LayerNormIds::init(
                        &mut store,
                        &format!("video.l{l}.ln_xtmp"),
                        gv,
                        cfg.e_v,
                    ),
                    cross_tmp: MhaIds::init(
                        &mut store,
                        &format!("video.l{l}.cross_tmp"),
                        gv,
                        cfg.e_v,
                        cfg.e_v,
                        cfg.n_heads,
                        &mut rng,
                    ),
                })
                .collect(),
            final_ln: LayerNormIds::init(&mut store, "video.final_ln", gv, cfg.e_v),
            head: LinearIds::init_zero(
                &mut store,
                "video.head",
                gv,
                cfg.e_v,
                p2 * cfg.video_channels,
            ),
        };

        let ga = ParamGroup::AudioTower;
        let audio = AudioTowerIds {
            embed: LinearIds::init(&mut store, "audio.embed", ga, cfg.d_a, cfg.e_a, &mut rng),
            pos: store.register(
                "audio.pos",
                ga,
                GTensor::randn(&[cfg.t_a, cfg.e_a], 0.02, &mut rng),
            ),
            t_mlp1: LinearIds::init(&mut store, "audio.t_mlp1", ga, cfg.e_a, cfg.e_a, &mut rng),
            t_mlp2: LinearIds::init(&mut store, "audio.t_mlp2", ga, cfg.e_a, cfg.e_a, &mut rng),
            text_proj: LinearIds::init(&mut store, "audio.text_proj", ga, cfg.e_v, cfg.e_a, &mut rng),
            layers: (0..cfg.layers)
                .map(|l| AudioLayerIds {
                    attn: MhaIds::init(
                        &mut store,
                        &format!("audio.l{l}.attn"),
                        ga,
                        cfg.e_a,
                        cfg.e_a,
                        cfg.n_heads,
                        &mut rng,
                    ),
                    ln1: LayerNormIds::init(&mut store, &format!("audio.l{l}.ln1"), ga, cfg.e_a),
                    cross: MhaIds::init(
                        &mut store,
                        &format!("audio.l{l}.cross"),
                        ga,
                        cfg.e_a,
                        cfg.e_a,
                        cfg.n_heads,
                        &mut rng,
                    ),
                    ln2: LayerNormIds::init(&mut store, &format!("audio.l{l}.ln2"), ga, cfg.e_a),
                    mlp: MlpIds::init(
                        &mut store,
                        &format!("audio.l{l}.mlp"),
                        ga,
                        cfg.e_a,
                        cfg.mlp_ratio * cfg.e_a,
                        &mut rng,
                    ),
                    ln3: LayerNormIds::init(&mut store, &format!("audio.l{l}.ln3"), ga, cfg.e_a),
                })
                .collect(),
            final_ln: LayerNormIds::init(&mut store, "audio.final_ln", ga, cfg.e_a),
            head: LinearIds::init_zero(&mut store, "audio.head", ga, cfg.e_a, cfg.d_a),
        };

        let gad = ParamGroup::Adaptors;
        let adaptors = (0..cfg.layers)
            .map(|l| AdaptorIds {
                attn: MhaIds::init(
                    &mut store,
                    &format!("adaptor.l{l}.attn"),
                    gad,
                    cfg.e_v,
                    cfg.e_v,
                    cfg.n_heads,
                    &mut rng,
                ),
                ln: LayerNormIds::init(&mut store, &format!("adaptor.l{l}.ln"), gad, cfg.e_v),
                proj: LinearIds::init(
                    &mut store,
                    &format!("adaptor.l{l}.proj"),
                    gad,
                    cfg.e_v,
                    cfg.e_a,
                    &mut rng,
                ),
            })
            .collect();

        Ok(GDualDit {
            cfg,
            store,
            text,
            video,
            audio,
            adaptors,
            maps: RefCell::new(HashMap::new()),
        })
    }

    /// The same model widened to f64, parameter values cast losslessly.
    pub fn widened(&self) -> Result<GDualDit<f64>> {
        let mut wide = GDualDit::<f64>::new(self.cfg.clone())?;
        let ids: Vec<ParamId> = wide.store.entries().map(|(id, _)| id).collect();
        for id in ids {
            *wide.store.get_mut(id) = self.store.get(id).widen();
        }
        Ok(wide)
    }

    fn map(&self, key: MapKey, build: impl FnOnce() -> Vec<u32>) -> Rc<Vec<u32>> {
        if let Some(m) = self.maps.borrow().get(&key) {
            return Rc::clone(m);
        }
        let m = Rc::new(build());
        self.maps.borrow_mut().insert(key, Rc::clone(&m));
        m
    }

    /// The timestep embedding of a single t, as the audio tower sees it.
    pub fn timestep_embedding(&self, t: f32) -> Result<GTensor<T>> {
        validate_times(&[t])?;
        let mut sess = Session::inference(&self.store);
        let v = self.timestep_tokens(&mut sess, &[t])?;
        Ok(sess
            .tape
            .value(v)
            .reshaped(vec![self.cfg.e_a])
            .expect("single token"))
    }

    /// Sinusoid -> 2-layer MLP -> one token per batch item: `[B, 1, E_a]`.
    fn timestep_tokens(&self, sess: &mut Session<T>, ts: &[f32]) -> Result<Var> {
        let b = ts.len();
        let mut feats = Vec::with_capacity(b * self.cfg.e_a);
        for &t in ts {
            let row: GTensor<T> = sinusoid_features(t, self.cfg.e_a);
            feats.extend_from_slice(row.data());
        }
        let x = sess
            .tape
            .constant(GTensor::from_parts(vec![b, self.cfg.e_a], feats));
        let h = self.audio.t_mlp1.apply_2d(sess, x)?;
        let h = sess.tape.silu(h)?;
        let h = self.audio.t_mlp2.apply_2d(sess, h)?;
        sess.tape.reshape(h, vec![b, 1, self.cfg.e_a])
    }

    /// Video-tower modulation trunk: `[B, E_v]`.
    fn video_t_trunk(&self, sess: &mut Session<T>, ts: &[f32]) -> Result<Var> {
        let b = ts.len();
        let mut feats = Vec::with_capacity(b * self.cfg.e_v);
        for &t in ts {
            let row: GTensor<T> = sinusoid_features(t, self.cfg.e_v);
            feats.extend_from_slice(row.data());
        }
        let x = sess
            .tape
            .constant(GTensor::from_parts(vec![b, self.cfg.e_v], feats));
        let h = self.video.t_trunk.apply_2d(sess, x)?;
        sess.tape.silu(h)
    }

    /// Full forward pass. `video: [B, T_v, C, H', W']`, `audio: [B, T_a, D_A]`,
    /// one shared `t` per batch item. Returns taped velocity vars
    /// (video, audio).
    pub fn forward_taped(
        &self,
        sess: &mut Session<T>,
        video: &GTensor<T>,
        audio: &GTensor<T>,
        ts: &[f32],
        conds: &[TextCondition],
    ) -> Result<(Var, Var)> {
        let video_v = sess.tape.constant(video.clone());
        let audio_v = sess.tape.constant(audio.clone());
        self.forward_vars(sess, video_v, audio_v, ts, conds)
    }

    /// As [`Self::forward_taped`] but with the latent inputs already on the
    /// tape, so gradients can flow into them (used by gradient checks and
    /// sensitivity probes).
    pub fn forward_vars(
        &self,
        sess: &mut Session<T>,
        video: Var,
        audio: Var,
        ts: &[f32],
        conds: &[TextCondition],
    ) -> Result<(Var, Var)> {
        let b = ts.len();
        validate_times(ts)?;
        if conds.len() != b {
            return Err(Error::config(format!(
                "{} conditions for batch {b}",
                conds.len()
            )));
        }
        self.validate_video_shape(sess.tape.value(video), b)?;
        self.validate_audio_shape(sess.tape.value(audio), b)?;

        let text_kv = self.text.encode(sess, conds)?;
        let t_token = self.timestep_tokens(sess, ts)?;

        let (video_vel, feats) = if self.cfg.audio_only {
            let shape = sess.tape.value(video).shape().to_vec();
            let zero = sess.tape.constant(GTensor::zeros(&shape));
            (zero, Vec::new())
        } else {
            self.video_tower(sess, video, ts, text_kv)?
        };

        let audio_vel = self.audio_tower(sess, audio, &feats, t_token, text_kv)?;
        Ok((video_vel, audio_vel))
    }

    fn validate_video_shape(&self, video: &GTensor<T>, b: usize) -> Result<()> {
        let s = video.shape();
        if s.len() != 5 || s[0] != b || s[2] != self.cfg.video_channels {
            return Err(Error::config(format!(
                "video latent {s:?} does not match config (batch {b}, channels {})",
                self.cfg.video_channels
            )));
        }
        if s[1] != self.cfg.t_v {
            return Err(Error::config(format!(
                "video latent has {} frames, model positional table holds {}",
                s[1], self.cfg.t_v
            )));
        }
        if s[3] % self.cfg.patch != 0 || s[4] % self.cfg.patch != 0 {
            return Err(Error::shape(format!(
                "video latent grid {}x{} not divisible by patch {}",
                s[3], s[4], self.cfg.patch
            )));
        }
        Ok(())
    }

    fn validate_audio_shape(&self, audio: &GTensor<T>, b: usize) -> Result<()> {
        let s = audio.shape();
        if s.len() != 3 || s[0] != b || s[2] != self.cfg.d_a {
            return Err(Error::config(format!(
                "audio latent {s:?} does not match config (batch {b}, d_a {})",
                self.cfg.d_a
            )));
        }
        if s[1] > self.cfg.t_a {
            return Err(Error::config(format!(
                "audio latent has {} frames, model positional table holds {}",
                s[1], self.cfg.t_a
            )));
        }
        Ok(())
    }

    /// Video tower: patchify, L layers of (spatial; temporal) attention,
    /// final head, unpatchify. Returns the velocity and per-layer pooled
    /// temporal-attention outputs.
    fn video_tower(
        &self,
        sess: &mut Session<T>,
        video: Var,
        ts: &[f32],
        text_kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.cfg;
        let s = sess.tape.value(video).shape().to_vec();
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (hp, wp) = (h / cfg.patch, w / cfg.patch);
        let s_tokens = hp * wp;
        let seq = t * s_tokens;

        let mut tokens = self.patchify(sess, video, b, t, c, h, w)?;

        // positions: learned temporal and spatial tables, summed
        let pos_t = sess.p(self.video.pos_t);
        let map_t = self.map(MapKey::PosRepeatT(t, s_tokens), || {
            let mut m = Vec::with_capacity(seq * cfg.e_v);
            for ti in 0..t {
                for _ in 0..s_tokens {
                    for e in 0..cfg.e_v {
                        m.push((ti * cfg.e_v + e) as u32);
                    }
                }
            }
            m
        });
        let pos_t_rep = sess.tape.gather(pos_t, map_t, vec![seq, cfg.e_v])?;
        let pos_s = self.spatial_positions(sess, hp, wp)?;
        let map_s = self.map(MapKey::PosRepeatS(t, s_tokens), || {
            let mut m = Vec::with_capacity(seq * cfg.e_v);
            for _ti in 0..t {
                for si in 0..s_tokens {
                    for e in 0..cfg.e_v {
                        m.push((si * cfg.e_v + e) as u32);
                    }
                }
            }
            m
        });
        let pos_s_rep = sess.tape.gather(pos_s, map_s, vec![seq, cfg.e_v])?;
        tokens = sess.tape.add(tokens, pos_t_rep)?;
        tokens = sess.tape.add(tokens, pos_s_rep)?;

        let trunk = self.video_t_trunk(sess, ts)?;
        let mut feats = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (out, feat) = self.video_layer(sess, l, tokens, text_kv, trunk, b, t, s_tokens)?;
            tokens = out;
            feats.push(feat);
        }

        let normed = self.video.final_ln.apply(sess, tokens)?;
        let head = self.video.head.apply(sess, normed)?;
        let out = self.unpatchify(sess, head, b, t, c, h, w)?;
        Ok((out, feats))
    }

    /// One video layer: spatial attention (self + text cross), then
    /// temporal attention (self + text cross). Exports the spatially pooled
    /// temporal-attention output.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn video_layer(
        &self,
        sess: &mut Session<T>,
        l: usize,
        tokens: Var,
        text_kv: Var,
        trunk: Var,
        b: usize,
        t: usize,
        s_tokens: usize,
    ) -> Result<(Var, Var)> {
        let layer = &self.video.layers[l];
        let e = self.cfg.e_v;
        let heads = layer.t_head.apply_2d(sess, trunk)?; // [B, 4E]
        let shift_sp = col_block(sess, heads, 0, e)?;
        let scale_sp = col_block(sess, heads, e, e)?;
        let shift_tmp = col_block(sess, heads, 2 * e, e)?;
        let scale_tmp = col_block(sess, heads, 3 * e, e)?;

        // spatial: attend over patches within each frame
        let n1 = layer.ln_sp.apply(sess, tokens)?;
        let m1 = modulate(sess, n1, shift_sp, scale_sp)?;
        let grouped = sess.tape.reshape(m1, vec![b * t, s_tokens, e])?;
        let attn = layer.attn_sp.apply(sess, grouped, grouped)?;
        let attn = sess.tape.reshape(attn, vec![b, t * s_tokens, e])?;
        let mut x = sess.tape.add(tokens, attn)?;

        let nx = layer.ln_xsp.apply(sess, x)?;
        let cross = layer.cross_sp.apply(sess, nx, text_kv)?;
        x = sess.tape.add(x, cross)?;

        // temporal: attend over frames within each patch position
        let n2 = layer.ln_tmp.apply(sess, x)?;
        let m2 = modulate(sess, n2, shift_tmp, scale_tmp)?;
        let as_grid = sess.tape.reshape(m2, vec![b, t, s_tokens, e])?;
        let swapped = sess.tape.permute(as_grid, &[0, 2, 1, 3])?;
        let grouped = sess.tape.reshape(swapped, vec![b * s_tokens, t, e])?;
        let attn = layer.attn_tmp.apply(sess, grouped, grouped)?;
        let back = sess.tape.reshape(attn, vec![b, s_tokens, t, e])?;
        let unswapped = sess.tape.permute(back, &[0, 2, 1, 3])?;
        let attn = sess.tape.reshape(unswapped, vec![b, t * s_tokens, e])?;
        x = sess.tape.add(x, attn)?;

        let nx = layer.ln_xtmp.apply(sess, x)?;
        let cross = layer.cross_tmp.apply(sess, nx, text_kv)?;
        x = sess.tape.add(x, cross)?;

        // exported conditioning features: spatial mean pool to [B, T, E]
        let grid = sess.tape.reshape(x, vec![b, t, s_tokens, e])?;
        let pooled = sess.tape.mean_axis(grid, 2)?;
        let feat = sess.tape.reshape(pooled, vec![b, t, e])?;
        Ok((x, feat))
    }

    /// Audio tower over `[B, T_a, D_A]` with per-layer conditioning.
    fn audio_tower(
        &self,
        sess: &mut Session<T>,
        audio: Var,
        video_feats: &[Var],
        t_token: Var,
        text_kv: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let s = sess.tape.value(audio).shape().to_vec();
        let (_b, t_a) = (s[0], s[1]);

        let mut h = self.audio.embed.apply(sess, audio)?;
        let pos = sess.p(self.audio.pos);
        let map = {
            let e = cfg.e_a;
            let mut m = Vec::with_capacity(t_a * e);
            for ti in 0..t_a {
                for ei in 0..e {
                    m.push((ti * e + ei) as u32);
                }
            }
            Rc::new(m)
        };
        let pos_rows = sess.tape.gather(pos, map, vec![t_a, cfg.e_a])?;
        h = sess.tape.add(h, pos_rows)?;

        let text_a = if cfg.audio_only || cfg.audio_text_cond {
            Some(self.audio.text_proj.apply(sess, text_kv)?)
        } else {
            None
        };

        for (l, layer) in self.audio.layers.iter().enumerate() {
            // cross-attention conditions: adapted video features per layer,
            // optional text, and the timestep token
            let mut parts: Vec<Var> = Vec::with_capacity(3);
            if !cfg.audio_only {
                let feat = video_feats[l];
                let adapted = if cfg.use_adaptor {
                    self.adaptor(sess, l, feat)?
                } else {
                    feat
                };
                parts.push(adapted);
            }
            if let Some(txt) = text_a {
                parts.push(txt);
            }
            parts.push(t_token);
            let cond = sess.tape.concat(1, &parts)?;

            let attn = layer.attn.apply(sess, h, h)?;
            let sum = sess.tape.add(h, attn)?;
            h = layer.ln1.apply(sess, sum)?;

            let cross = layer.cross.apply(sess, h, cond)?;
            let sum = sess.tape.add(h, cross)?;
            h = layer.ln2.apply(sess, sum)?;

            let ff = layer.mlp.apply(sess, h)?;
            let sum = sess.tape.add(h, ff)?;
            h = layer.ln3.apply(sess, sum)?;
        }

        let normed = self.audio.final_ln.apply(sess, h)?;
        self.audio.head.apply(sess, normed)
    }

    /// Modality adaptor `l`: self-attention over time, layer norm, linear.
    pub(crate) fn adaptor(&self, sess: &mut Session<T>, l: usize, feat: Var) -> Result<Var> {
        let ids = &self.adaptors[l];
        let attn = ids.attn.apply(sess, feat, feat)?;
        let normed = ids.ln.apply(sess, attn)?;
        ids.proj.apply(sess, normed)
    }

    /// Pre-Conv3D (3x3x3, stride 1, padding 1 via im2col) then 2x2 patch
    /// flattening and the patch-merge projection: `[B,T,C,H,W]` ->
    /// `[B, T*S, E_v]`.
    fn patchify(
        &self,
        sess: &mut Session<T>,
        input: Var,
        b: usize,
        t: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let p = cfg.patch;
        let (hp, wp) = (h / p, w / p);
        let s_tokens = hp * wp;

        let col_map = self.map(MapKey::Im2col(b, t, h, w), || {
            im2col3d_map(b, t, c, h, w)
        });
        let col_w = c * CONV_K * CONV_K * CONV_K;
        let col = sess
            .tape
            .gather(input, col_map, vec![b * t * h * w, col_w])?;
        let conv_w = sess.p(self.video.conv_w);
        let conv_b = sess.p(self.video.conv_b);
        let conv = sess.tape.matmul(col, conv_w)?;
        let conv = sess.tape.add(conv, conv_b)?;

        let split_map = self.map(MapKey::PatchSplit(b, t, h, w), || {
            patch_split_map(b, t, h, w, p, cfg.e_v)
        });
        let patches = sess.tape.gather(
            conv,
            split_map,
            vec![b, t * s_tokens, p * p * cfg.e_v],
        )?;
        self.video.patch_merge.apply(sess, patches)
    }

    /// Inverse of the patch split for the output head: token features
    /// `[B, T*S, p^2*C]` -> `[B, T, C, H, W]`.
    fn unpatchify(
        &self,
        sess: &mut Session<T>,
        tokens: Var,
        b: usize,
        t: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let p = self.cfg.patch;
        let map = self.map(MapKey::Unpatch(b, t, h, w), || {
            unpatch_map(b, t, c, h, w, p)
        });
        sess.tape.gather(tokens, map, vec![b, t, c, h, w])
    }

    /// Spatial positional rows for an `hp x wp` patch grid: the learned
    /// table at the training grid, bilinearly interpolated elsewhere.
    fn spatial_positions(&self, sess: &mut Session<T>, hp: usize, wp: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let (gh, gw) = (cfg.grid_h / cfg.patch, cfg.grid_w / cfg.patch);
        let table = sess.p(self.video.pos_s);
        if hp == gh && wp == gw {
            return Ok(table);
        }
        let m: GTensor<T> = bilinear_matrix(gh, gw, hp, wp);
        let m = sess.tape.constant(m);
        sess.tape.matmul(m, table)
    }
}

impl DualDit {
    /// Convenience inference wrapper returning plain tensors.
    pub fn forward(
        &self,
        video: &Tensor,
        audio: &Tensor,
        ts: &[f32],
        conds: &[TextCondition],
    ) -> Result<DualVelocity> {
        let mut sess = Session::inference(&self.store);
        let (v, a) = self.forward_taped(&mut sess, video, audio, ts, conds)?;
        Ok(DualVelocity {
            video: sess.tape.value(v).clone(),
            audio: sess.tape.value(a).clone(),
        })
    }
}

impl LinearIds {
    /// Apply to a rank-2 input (no token axis).
    fn apply_2d<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        self.apply(sess, x)
    }
}

/// `x * (1 + scale) + shift` with `shift`/`scale` shaped `[B, 1, E]`.
fn modulate<T: Scalar>(sess: &mut Session<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = sess.tape.add_scalar(scale, 1.0)?;
    let scaled = sess.tape.mul(x, one_plus)?;
    sess.tape.add(scaled, shift)
}

/// Columns `[start, start+len)` of `[B, K]`, reshaped to `[B, 1, len]`.
fn col_block<T: Scalar>(sess: &mut Session<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let shape = sess.tape.value(x).shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    let mut map = Vec::with_capacity(b * len);
    for bi in 0..b {
        for j in 0..len {
            map.push((bi * k + start + j) as u32);
        }
    }
    sess.tape.gather(x, Rc::new(map), vec![b, 1, len])
}

fn validate_times(ts: &[f32]) -> Result<()> {
    for &t in ts {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("flow time {t} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Gather map for the 3x3x3 im2col over `[B, T, C, H, W]` with padding 1.
fn im2col3d_map(b: usize, t: usize, c: usize, h: usize, w: usize) -> Vec<u32> {
    let k = CONV_K as isize;
    let mut map = Vec::with_capacity(b * t * h * w * c * 27);
    for bi in 0..b {
        for ti in 0..t as isize {
            for hi in 0..h as isize {
                for wi in 0..w as isize {
                    for ci in 0..c {
                        for dt in -1..k - 1 {
                            for dy in -1..k - 1 {
                                for dx in -1..k - 1 {
                                    let (tt, yy, xx) = (ti + dt, hi + dy, wi + dx);
                                    if tt < 0
                                        || tt >= t as isize
                                        || yy < 0
                                        || yy >= h as isize
                                        || xx < 0
                                        || xx >= w as isize
                                    {
                                        map.push(u32::MAX);
                                    } else {
                                        let idx = (((bi * t + tt as usize) * c + ci) * h
                                            + yy as usize)
                                            * w
                                            + xx as usize;
                                        map.push(idx as u32);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    map
}

/// Gather map flattening p x p patches of `[B*T*H*W, E]` conv output rows
/// (in (b,t,h,w) order) into tokens `[B, T*S, p^2*E]`.
fn patch_split_map(b: usize, t: usize, h: usize, w: usize, p: usize, e: usize) -> Vec<u32> {
    let (hp, wp) = (h / p, w / p);
    let mut map = Vec::with_capacity(b * t * hp * wp * p * p * e);
    for bi in 0..b {
        for ti in 0..t {
            for ph in 0..hp {
                for pw in 0..wp {
                    for dy in 0..p {
                        for dx in 0..p {
                            let row = ((bi * t + ti) * h + (ph * p + dy)) * w + (pw * p + dx);
                            for ei in 0..e {
                                map.push((row * e + ei) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    map
}

/// Gather map from head tokens `[B, T*S, p^2*C]` back to `[B, T, C, H, W]`.
fn unpatch_map(b: usize, t: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<u32> {
    let (hp, wp) = (h / p, w / p);
    let s_tokens = hp * wp;
    let token_w = p * p * c;
    let mut map = vec![0u32; b * t * c * h * w];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let (ph, dy) = (yy / p, yy % p);
                        let (pw, dx) = (xx / p, xx % p);
                        let token = (bi * t + ti) * s_tokens + ph * wp + pw;
                        let within = (dy * p + dx) * c + ci;
                        let dst = (((bi * t + ti) * c + ci) * h + yy) * w + xx;
                        map[dst] = (token * token_w + within) as u32;
                    }
                }
            }
        }
    }
    map
}

/// Bilinear interpolation matrix from a `gh x gw` grid to `nh x nw`
/// (align-corners). Rows sum to 1.
fn bilinear_matrix<T: Scalar>(gh: usize, gw: usize, nh: usize, nw: usize) -> GTensor<T> {
    let src_s = gh * gw;
    let dst_s = nh * nw;
    let mut m = vec![0.0f32; dst_s * src_s];
    for ty in 0..nh {
        for tx in 0..nw {
            let sy = if nh > 1 {
                ty as f32 * (gh - 1) as f32 / (nh - 1) as f32
            } else {
                (gh - 1) as f32 / 2.0
            };
            let sx = if nw > 1 {
                tx as f32 * (gw - 1) as f32 / (nw - 1) as f32
            } else {
                (gw - 1) as f32 / 2.0
            };
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            let row = ty * nw + tx;
            m[row * src_s + y0 * gw + x0] += (1.0 - fy) * (1.0 - fx);
            m[row * src_s + y0 * gw + x1] += (1.0 - fy) * fx;
            m[row * src_s + y1 * gw + x0] += fy * (1.0 - fx);
            m[row * src_s + y1 * gw + x1] += fy * fx;
        }
    }
    GTensor::from_parts(vec![dst_s, src_s], m.into_iter().map(T::from_f32).collect())
}
