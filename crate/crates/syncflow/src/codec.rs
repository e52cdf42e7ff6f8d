//! Latent codecs for video and audio.
//!
//! The flow model operates on compressed latents. The default codec is a
//! lossless rearrangement: space-to-depth for video (temporal and spatial
//! blocks folded into channels) and frame stacking for audio, followed by a
//! value map that multiplies by a power of two. Power-of-two scaling and
//! element permutations are exact in floating point, so
//! `decode(encode(x)) == x` bitwise; codec error is zero and the generative
//! model is isolated under test. A small trained VAE is available as an
//! alternative mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SplitMix64, Tape, Tensor, Var};

/// Raw video: `frames` RGB images of `height` x `width`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Tensor, // [F, 3, H, W]
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<VideoTensor> {
        let t = Tensor::new(vec![frames, 3, height, width], data)?;
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::format("video values outside [0, 1]".to_string()));
        }
        Ok(VideoTensor { data: t })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Pixel at (frame, channel, y, x).
    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.data.data()[((f * 3 + c) * h + y) * w + x]
    }
}

/// Monophonic audio, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWave {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioWave {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<AudioWave> {
        if samples.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::format("audio values outside [-1, 1]".to_string()));
        }
        Ok(AudioWave {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f32 {
        self.samples.len() as f32 / self.sample_rate as f32
    }
}

/// Compressed video latent, shape `[F', C_z, H', W']` with `F' = F/r_t`,
/// `H' = H/r_s`, `W' = W/r_s`, `C_z = 3 * r_t * r_s^2` in lossless mode.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent(pub Tensor);

/// Compressed audio latent, shape `[T, D_A]` with `T = M / r_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioLatent(pub Tensor);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    Lossless,
    TrainedVae,
}

/// Codec configuration. The value-map scales are power-of-two exponents
/// computed once from a training split and then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Video temporal downsampling factor.
    pub r_t: usize,
    /// Video spatial downsampling factor.
    pub r_s: usize,
    /// Audio downsampling factor (samples per latent frame).
    pub r_a: usize,
    /// Audio latent width; >= r_a, frames zero-padded above r_a.
    pub d_a: usize,
    pub mode: CodecMode,
    /// log2 of the video value-map scale.
    #[serde(default)]
    pub video_scale_log2: i32,
    /// log2 of the audio value-map scale.
    #[serde(default)]
    pub audio_scale_log2: i32,
    /// Seed of the fixed audio mixing permutation (an orthonormal matrix
    /// that is exactly invertible).
    #[serde(default = "default_perm_seed")]
    pub audio_perm_seed: u64,
}

fn default_perm_seed() -> u64 {
    0x5F3C_AE1D
}

impl CodecConfig {
    /// Desk-scale default: 32x32 video at factor 4, 8 kHz audio at 160.
    pub fn desk() -> CodecConfig {
        CodecConfig {
            r_t: 4,
            r_s: 4,
            r_a: 160,
            d_a: 160,
            mode: CodecMode::Lossless,
            video_scale_log2: 0,
            audio_scale_log2: 0,
            audio_perm_seed: default_perm_seed(),
        }
    }

    /// Paper-scale preset: temporal factor 4, spatial factor 8, audio
    /// factor 960 giving a 50 Hz latent of width 1142. Stored for reference
    /// and selectable, not trained at desk scale.
    pub fn paper() -> CodecConfig {
        CodecConfig {
            r_t: 4,
            r_s: 8,
            r_a: 960,
            d_a: 1142,
            mode: CodecMode::Lossless,
            video_scale_log2: 0,
            audio_scale_log2: 0,
            audio_perm_seed: default_perm_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_t < 1 || self.r_s < 1 || self.r_a < 1 {
            return Err(Error::config("codec factors must be >= 1".to_string()));
        }
        if self.d_a < self.r_a {
            return Err(Error::config(format!(
                "d_a {} must be >= r_a {} so a latent frame can hold r_a samples",
                self.d_a, self.r_a
            )));
        }
        Ok(())
    }

    /// Channel count of the video latent: C * r_t * r_s^2.
    pub fn video_channels(&self) -> usize {
        3 * self.r_t * self.r_s * self.r_s
    }

    pub fn video_latent_shape(&self, frames: usize, height: usize, width: usize) -> Vec<usize> {
        vec![
            frames / self.r_t,
            self.video_channels(),
            height / self.r_s,
            width / self.r_s,
        ]
    }

    pub fn audio_latent_shape(&self, samples: usize) -> Vec<usize> {
        vec![samples / self.r_a, self.d_a]
    }

    /// Fix the value-map scales from training-split statistics: the nearest
    /// power of two to 1/std per modality, so latents come out roughly unit
    /// variance while the map stays exactly invertible.
    pub fn calibrate(&mut self, videos: &[VideoTensor], audios: &[AudioWave]) {
        self.video_scale_log2 =
            scale_log2_for(videos.iter().flat_map(|v| v.tensor().data().iter()));
        self.audio_scale_log2 = scale_log2_for(audios.iter().flat_map(|a| a.samples().iter()));
    }
}

fn scale_log2_for<'a>(values: impl Iterator<Item = &'a f32>) -> i32 {
    let mut n = 0u64;
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    for &v in values {
        n += 1;
        sum += v as f64;
        sq += v as f64 * v as f64;
    }
    if n == 0 {
        return 0;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(1e-12);
    (-var.sqrt().log2()).round().clamp(-8.0, 8.0) as i32
}

fn pow2(exp: i32) -> f32 {
    2.0f32.powi(exp)
}

/// Seeded Fisher-Yates permutation of 0..n and its inverse.
fn mixing_permutation(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    let mut inv = vec![0usize; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    (perm, inv)
}

/// The codec: configuration plus, in trained-VAE mode, the learned nets.
#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub vae: Option<VaeParams>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Codec> {
        cfg.validate()?;
        let vae = match cfg.mode {
            CodecMode::Lossless => None,
            CodecMode::TrainedVae => Some(VaeParams::init(&cfg)),
        };
        Ok(Codec { cfg, vae })
    }

    pub fn encode_video(&self, y: &VideoTensor, rng: &mut SplitMix64) -> Result<VideoLatent> {
        let (f, h, w) = (y.frames(), y.height(), y.width());
        if f % self.cfg.r_t != 0 {
            return Err(Error::shape(format!(
                "frame axis: {f} frames not divisible by temporal factor {}",
                self.cfg.r_t
            )));
        }
        if h % self.cfg.r_s != 0 {
            return Err(Error::shape(format!(
                "height axis: {h} not divisible by spatial factor {}",
                self.cfg.r_s
            )));
        }
        if w % self.cfg.r_s != 0 {
            return Err(Error::shape(format!(
                "width axis: {w} not divisible by spatial factor {}",
                self.cfg.r_s
            )));
        }
        let mut blocks = self.video_space_to_depth(y);
        match self.cfg.mode {
            CodecMode::Lossless => {
                let scale = pow2(self.cfg.video_scale_log2);
                for v in blocks.data_mut() {
                    *v *= scale;
                }
                Ok(VideoLatent(blocks))
            }
            CodecMode::TrainedVae => {
                let vae = self.vae.as_ref().expect("trained-vae mode has params");
                let rows = channels_last(&blocks);
                let z = vae.video.encode_sampled_rows(&rows, rng)?;
                Ok(VideoLatent(channels_first(&z, blocks.shape())))
            }
        }
    }

    pub fn decode_video(&self, z: &VideoLatent) -> Result<VideoTensor> {
        let shape = z.0.shape();
        if shape.len() != 4 || shape[1] != self.cfg.video_channels() {
            return Err(Error::shape(format!(
                "video latent shape {shape:?} inconsistent with codec (channels {})",
                self.cfg.video_channels()
            )));
        }
        let blocks = match self.cfg.mode {
            CodecMode::Lossless => {
                let scale = pow2(-self.cfg.video_scale_log2);
                let mut t = z.0.clone();
                for v in t.data_mut() {
                    *v *= scale;
                }
                t
            }
            CodecMode::TrainedVae => {
                let vae = self.vae.as_ref().expect("trained-vae mode has params");
                let rows = channels_last(&z.0);
                let dec = vae.video.decode_rows(&rows)?;
                channels_first(&dec, z.0.shape())
            }
        };
        Ok(self.video_depth_to_space(&blocks))
    }

    pub fn encode_audio(&self, y: &AudioWave, rng: &mut SplitMix64) -> Result<AudioLatent> {
        let m = y.len();
        if m % self.cfg.r_a != 0 {
            return Err(Error::shape(format!(
                "sample axis: {m} samples not divisible by audio factor {}",
                self.cfg.r_a
            )));
        }
        let mut frames = self.audio_stack_frames(y);
        match self.cfg.mode {
            CodecMode::Lossless => {
                let scale = pow2(self.cfg.audio_scale_log2);
                for v in frames.data_mut() {
                    *v *= scale;
                }
                Ok(AudioLatent(frames))
            }
            CodecMode::TrainedVae => {
                let vae = self.vae.as_ref().expect("trained-vae mode has params");
                let z = vae.audio.encode_sampled_rows(&frames, rng)?;
                Ok(AudioLatent(z))
            }
        }
    }

    pub fn decode_audio(&self, z: &AudioLatent, sample_rate: u32) -> Result<AudioWave> {
        let shape = z.0.shape();
        if shape.len() != 2 || shape[1] != self.cfg.d_a {
            return Err(Error::shape(format!(
                "audio latent shape {shape:?} inconsistent with codec (d_a {})",
                self.cfg.d_a
            )));
        }
        let frames = match self.cfg.mode {
            CodecMode::Lossless => {
                let scale = pow2(-self.cfg.audio_scale_log2);
                let mut t = z.0.clone();
                for v in t.data_mut() {
                    *v *= scale;
                }
                t
            }
            CodecMode::TrainedVae => {
                let vae = self.vae.as_ref().expect("trained-vae mode has params");
                vae.audio.decode_rows(&z.0)?
            }
        };
        let t = frames.shape()[0];
        // sample s of each frame was stored at position perm[s]
        let (perm, _) = mixing_permutation(self.cfg.d_a, self.cfg.audio_perm_seed);
        let mut samples = Vec::with_capacity(t * self.cfg.r_a);
        let data = frames.data();
        for fr in 0..t {
            let row = &data[fr * self.cfg.d_a..(fr + 1) * self.cfg.d_a];
            for s in 0..self.cfg.r_a {
                samples.push(row[perm[s]].clamp(-1.0, 1.0));
            }
        }
        AudioWave::new(samples, sample_rate)
    }

    /// Space-to-depth rearrangement: a pure element permutation.
    fn video_space_to_depth(&self, y: &VideoTensor) -> Tensor {
        let (rt, rs) = (self.cfg.r_t, self.cfg.r_s);
        let (f, h, w) = (y.frames(), y.height(), y.width());
        let (fp, hp, wp) = (f / rt, h / rs, w / rs);
        let cz = self.cfg.video_channels();
        let src = y.tensor().data();
        let mut out = vec![0.0f32; src.len()];
        for fi in 0..fp {
            for dt in 0..rt {
                for c in 0..3 {
                    for hi in 0..hp {
                        for dy in 0..rs {
                            for wi in 0..wp {
                                for dx in 0..rs {
                                    let cz_idx = ((dt * 3 + c) * rs + dy) * rs + dx;
                                    let dst = ((fi * cz + cz_idx) * hp + hi) * wp + wi;
                                    let srcidx = ((fi * rt + dt) * 3 + c) * h * w
                                        + (hi * rs + dy) * w
                                        + (wi * rs + dx);
                                    out[dst] = src[srcidx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![fp, cz, hp, wp], out)
    }

    fn video_depth_to_space(&self, blocks: &Tensor) -> VideoTensor {
        let (rt, rs) = (self.cfg.r_t, self.cfg.r_s);
        let shape = blocks.shape();
        let (fp, cz, hp, wp) = (shape[0], shape[1], shape[2], shape[3]);
        let (f, h, w) = (fp * rt, hp * rs, wp * rs);
        let src = blocks.data();
        let mut out = vec![0.0f32; src.len()];
        for fi in 0..fp {
            for dt in 0..rt {
                for c in 0..3 {
                    for hi in 0..hp {
                        for dy in 0..rs {
                            for wi in 0..wp {
                                for dx in 0..rs {
                                    let cz_idx = ((dt * 3 + c) * rs + dy) * rs + dx;
                                    let srcidx = ((fi * cz + cz_idx) * hp + hi) * wp + wi;
                                    let dst = ((fi * rt + dt) * 3 + c) * h * w
                                        + (hi * rs + dy) * w
                                        + (wi * rs + dx);
                                    out[dst] = src[srcidx].clamp(0.0, 1.0);
                                }
                            }
                        }
                    }
                }
            }
        }
        VideoTensor {
            data: Tensor::from_parts(vec![f, 3, h, w], out),
        }
    }

    /// Frame stacking: r_a consecutive samples per latent frame, zero-padded
    /// to d_a and mixed by the fixed permutation.
    fn audio_stack_frames(&self, y: &AudioWave) -> Tensor {
        let t = y.len() / self.cfg.r_a;
        let (perm, _) = mixing_permutation(self.cfg.d_a, self.cfg.audio_perm_seed);
        let mut out = vec![0.0f32; t * self.cfg.d_a];
        for fr in 0..t {
            let src = &y.samples()[fr * self.cfg.r_a..(fr + 1) * self.cfg.r_a];
            let row = &mut out[fr * self.cfg.d_a..(fr + 1) * self.cfg.d_a];
            for (s, &v) in src.iter().enumerate() {
                row[perm[s]] = v;
            }
        }
        Tensor::from_parts(vec![t, self.cfg.d_a], out)
    }
}

/// [N, C, ...spatial] -> [rows, C] where rows run over (N, spatial).
fn channels_last(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for s in 0..spatial {
                out[(ni * spatial + s) * c + ci] = src[(ni * c + ci) * spatial + s];
            }
        }
    }
    Tensor::from_parts(vec![n * spatial, c], out)
}

/// Inverse of [`channels_last`], restoring `target_shape`.
fn channels_first(rows: &Tensor, target_shape: &[usize]) -> Tensor {
    let (n, c) = (target_shape[0], target_shape[1]);
    let spatial: usize = target_shape[2..].iter().product();
    let src = rows.data();
    let mut out = vec![0.0f32; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for s in 0..spatial {
                out[(ni * c + ci) * spatial + s] = src[(ni * spatial + s) * c + ci];
            }
        }
    }
    Tensor::from_parts(target_shape.to_vec(), out)
}

/// KL divergence from N(mu, exp(logvar)) to the standard normal, summed over
/// elements: 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar). Always >= 0.
pub fn kl_diag_gaussian(mu: &Tensor, logvar: &Tensor) -> Result<f32> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(format!(
            "kl shapes differ: {:?} vs {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
        acc += 0.5 * ((m as f64) * (m as f64) + (lv as f64).exp() - 1.0 - lv as f64);
    }
    Ok(acc as f32)
}

/// Per-block linear VAE. A strided convolution whose kernel equals its
/// stride is exactly a linear map on flattened blocks, which is all the
/// desk-scale stand-in needs.
#[derive(Debug, Clone)]
pub struct BlockVae {
    /// [block_len, 2*latent] emitting (mu, logvar).
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    /// [latent, block_len].
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub block_len: usize,
    pub latent: usize,
}

impl BlockVae {
    pub fn init(block_len: usize, latent: usize, rng: &mut SplitMix64) -> BlockVae {
        BlockVae {
            enc_w: Tensor::randn(&[block_len, 2 * latent], 0.02, rng),
            enc_b: Tensor::zeros(&[2 * latent]),
            dec_w: Tensor::randn(&[latent, block_len], 0.02, rng),
            dec_b: Tensor::zeros(&[block_len]),
            block_len,
            latent,
        }
    }

    /// (mu, logvar) for each row of `rows: [n, block_len]`.
    pub fn encode_stats(&self, rows: &Tensor) -> Result<(Tensor, Tensor)> {
        let stats = linear_rows(rows, &self.enc_w, &self.enc_b)?;
        let n = stats.shape()[0];
        let d = self.latent;
        let mut mu = vec![0.0f32; n * d];
        let mut lv = vec![0.0f32; n * d];
        for r in 0..n {
            let row = &stats.data()[r * 2 * d..(r + 1) * 2 * d];
            mu[r * d..(r + 1) * d].copy_from_slice(&row[..d]);
            lv[r * d..(r + 1) * d].copy_from_slice(&row[d..]);
        }
        Ok((
            Tensor::from_parts(vec![n, d], mu),
            Tensor::from_parts(vec![n, d], lv),
        ))
    }

    pub fn encode_sampled_rows(&self, rows: &Tensor, rng: &mut SplitMix64) -> Result<Tensor> {
        let (mu, logvar) = self.encode_stats(rows)?;
        let mut z = mu;
        for (zi, &lv) in z.data_mut().iter_mut().zip(logvar.data()) {
            *zi += (0.5 * lv).exp() * rng.normal();
        }
        Ok(z)
    }

    pub fn decode_rows(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.numel() / self.latent;
        let rows = z.reshaped(vec![n, self.latent])?;
        linear_rows(&rows, &self.dec_w, &self.dec_b)
    }

    /// One SGD step on `recon MSE + beta * KL` for a batch of block rows.
    /// Returns (total loss, recon, kl). If anything goes non-finite the
    /// update is skipped and the parameters keep their last good value.
    pub fn train_step(
        &mut self,
        rows: &Tensor,
        beta: f32,
        lr: f32,
        noise_seed: u64,
    ) -> Result<(f32, f32, f32)> {
        let n = rows.shape()[0];
        let d = self.latent;
        let mut tape = Tape::new();
        let x = tape.constant(rows.clone());
        let enc_w = tape.leaf(self.enc_w.clone().with_grad());
        let enc_b = tape.leaf(self.enc_b.clone().with_grad());
        let dec_w = tape.leaf(self.dec_w.clone().with_grad());
        let dec_b = tape.leaf(self.dec_b.clone().with_grad());

        let stats = tape.matmul(x, enc_w)?;
        let stats = tape.add(stats, enc_b)?;
        let (mu, logvar) = split_columns(&mut tape, stats, d)?;

        // z = mu + exp(logvar/2) * eps
        let eps = Tensor::randn(&[n, d], 1.0, &mut SplitMix64::new(noise_seed));
        let half_lv = tape.scale(logvar, 0.5)?;
        let sigma = tape.exp(half_lv)?;
        let eps_v = tape.constant(eps);
        let noise = tape.mul(sigma, eps_v)?;
        let z = tape.add(mu, noise)?;

        let recon = tape.matmul(z, dec_w)?;
        let recon = tape.add(recon, dec_b)?;
        let diff = tape.sub(recon, x)?;
        let sq = tape.mul(diff, diff)?;
        let recon_loss = tape.mean_all(sq)?;

        let mu_sq = tape.mul(mu, mu)?;
        let e_lv = tape.exp(logvar)?;
        let s1 = tape.add(mu_sq, e_lv)?;
        let s2 = tape.sub(s1, logvar)?;
        let s3 = tape.add_scalar(s2, -1.0)?;
        let kl_sum = tape.sum_all(s3)?;
        let kl = tape.scale(kl_sum, 0.5 / n as f32)?;

        let kl_w = tape.scale(kl, beta)?;
        let loss = tape.add(recon_loss, kl_w)?;

        let loss_v = tape.value(loss).item()?;
        let recon_v = tape.value(recon_loss).item()?;
        let kl_v = tape.value(kl).item()?;
        let grads = tape.backward(loss)?;

        let vars = [enc_w, enc_b, dec_w, dec_b];
        let params = [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.dec_w,
            &mut self.dec_b,
        ];
        for (param, var) in params.into_iter().zip(vars) {
            if let Some(g) = grads.get(var) {
                for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }
        Ok((loss_v, recon_v, kl_v))
    }
}

/// Split `[n, 2d]` into the first and last `d` columns.
fn split_columns(tape: &mut Tape, v: Var, d: usize) -> Result<(Var, Var)> {
    let shape = tape.value(v).shape().to_vec();
    let n = shape[0];
    let total = shape[1];
    let mut map_a = Vec::with_capacity(n * d);
    let mut map_b = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in 0..d {
            map_a.push((r * total + c) as u32);
            map_b.push((r * total + d + c) as u32);
        }
    }
    let a = tape.gather(v, std::rc::Rc::new(map_a), vec![n, d])?;
    let b = tape.gather(v, std::rc::Rc::new(map_b), vec![n, d])?;
    Ok((a, b))
}

fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.add(h, bv)?;
    Ok(tape.value(h).clone())
}

/// Trained-VAE parameters for both modalities.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub video: BlockVae,
    pub audio: BlockVae,
}

impl VaeParams {
    fn init(cfg: &CodecConfig) -> VaeParams {
        let mut rng = SplitMix64::new(0xAE0);
        let video_block = cfg.video_channels();
        VaeParams {
            video: BlockVae::init(video_block, video_block, &mut rng),
            audio: BlockVae::init(cfg.d_a, cfg.d_a, &mut rng),
        }
    }
}

/// Train both VAEs on raw samples; `beta` weights the KL term (default
/// 1e-4). Returns the final (video loss, audio loss).
pub fn train_vae(
    codec: &mut Codec,
    videos: &[VideoTensor],
    audios: &[AudioWave],
    steps: usize,
    beta: f32,
    lr: f32,
) -> Result<(f32, f32)> {
    if codec.cfg.mode != CodecMode::TrainedVae {
        return Err(Error::config(
            "train_vae requires trained-vae codec mode".to_string(),
        ));
    }
    let helper = Codec {
        cfg: CodecConfig {
            mode: CodecMode::Lossless,
            ..codec.cfg.clone()
        },
        vae: None,
    };
    let vae = codec.vae.as_mut().expect("trained-vae mode has params");
    let mut last = (0.0, 0.0);
    for step in 0..steps {
        let vid = &videos[step % videos.len()];
        let aud = &audios[step % audios.len()];
        let v_rows = channels_last(&helper.video_space_to_depth(vid));
        let a_rows = helper.audio_stack_frames(aud);
        let (vl, _, _) = vae.video.train_step(&v_rows, beta, lr, step as u64)?;
        let (al, _, _) = vae.audio.train_step(&a_rows, beta, lr, step as u64 + 7777)?;
        last = (vl, al);
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_video(f: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f32> = (0..f * 3 * h * w).map(|_| rng.next_f32()).collect();
        VideoTensor::new(f, h, w, data).unwrap()
    }

    fn random_audio(m: usize, seed: u64) -> AudioWave {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f32> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        AudioWave::new(data, 8000).unwrap()
    }

    #[test]
    fn video_latent_shape_follows_factor_arithmetic() {
        // 16x3x32x32 at (r_t=4, r_s=4): frames 16/4=4, grid 32/4=8, and the
        // channel axis folds 3 * 4 * 4^2 = 192 values per block.
        let codec = Codec::new(CodecConfig::desk()).unwrap();
        let y = random_video(16, 32, 32, 1);
        let z = codec.encode_video(&y, &mut SplitMix64::new(0)).unwrap();
        assert_eq!(z.0.shape(), &[4, 192, 8, 8]);
        assert_eq!(codec.cfg.video_latent_shape(16, 32, 32), vec![4, 192, 8, 8]);
        assert_eq!(z.0.numel(), y.tensor().numel());
    }

    #[test]
    fn zero_video_maps_to_zero_latent() {
        let mut cfg = CodecConfig::desk();
        cfg.video_scale_log2 = 3;
        let codec = Codec::new(cfg).unwrap();
        let y = VideoTensor::new(16, 32, 32, vec![0.0; 16 * 3 * 32 * 32]).unwrap();
        let z = codec.encode_video(&y, &mut SplitMix64::new(0)).unwrap();
        assert!(z.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lossless_video_roundtrip_is_bitwise() {
        let mut cfg = CodecConfig::desk();
        cfg.video_scale_log2 = 4;
        let codec = Codec::new(cfg).unwrap();
        for seed in 0..5 {
            let y = random_video(16, 32, 32, seed);
            let z = codec.encode_video(&y, &mut SplitMix64::new(0)).unwrap();
            let back = codec.decode_video(&z).unwrap();
            assert!(back.tensor().bit_eq(y.tensor()), "seed {seed}");
        }
    }

    #[test]
    fn lossless_latent_roundtrip_is_bitwise() {
        // encode(decode(z)) == z on latents that decode into [0, 1] so the
        // clamp is inactive
        let mut cfg = CodecConfig::desk();
        cfg.video_scale_log2 = 2;
        let codec = Codec::new(cfg).unwrap();
        let y = random_video(8, 32, 32, 77);
        let z = codec.encode_video(&y, &mut SplitMix64::new(0)).unwrap();
        let y2 = codec.decode_video(&z).unwrap();
        let z2 = codec.encode_video(&y2, &mut SplitMix64::new(0)).unwrap();
        assert!(z.0.bit_eq(&z2.0));
    }

    #[test]
    fn audio_latent_shape_and_roundtrip() {
        let mut cfg = CodecConfig::desk();
        cfg.audio_scale_log2 = 5;
        let codec = Codec::new(cfg).unwrap();
        let y = random_audio(16000, 3);
        let z = codec.encode_audio(&y, &mut SplitMix64::new(0)).unwrap();
        assert_eq!(z.0.shape(), &[100, 160]);
        let back = codec.decode_audio(&z, 8000).unwrap();
        assert_eq!(back.samples().len(), 16000);
        for (a, b) in back.samples().iter().zip(y.samples()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn silence_maps_to_zero() {
        let codec = Codec::new(CodecConfig::desk()).unwrap();
        let y = AudioWave::new(vec![0.0; 1600], 8000).unwrap();
        let z = codec.encode_audio(&y, &mut SplitMix64::new(0)).unwrap();
        assert!(z.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_audio_latent_roundtrip() {
        // d_a > r_a exercises the zero-padding path
        let mut cfg = CodecConfig::desk();
        cfg.d_a = 200;
        cfg.audio_scale_log2 = 1;
        let codec = Codec::new(cfg).unwrap();
        let y = random_audio(3200, 9);
        let z = codec.encode_audio(&y, &mut SplitMix64::new(0)).unwrap();
        assert_eq!(z.0.shape(), &[20, 200]);
        let back = codec.decode_audio(&z, 8000).unwrap();
        for (a, b) in back.samples().iter().zip(y.samples()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn indivisible_dims_name_the_axis() {
        let codec = Codec::new(CodecConfig::desk()).unwrap();
        let y = random_video(15, 32, 32, 2);
        let err = codec.encode_video(&y, &mut SplitMix64::new(0)).unwrap_err();
        assert!(err.to_string().contains("frame axis"));
        let y = random_audio(16001, 2);
        let err = codec.encode_audio(&y, &mut SplitMix64::new(0)).unwrap_err();
        assert!(err.to_string().contains("sample axis"));
    }

    #[test]
    fn kl_zero_iff_standard_normal() {
        let mu = Tensor::zeros(&[4]);
        let lv = Tensor::zeros(&[4]);
        assert_eq!(kl_diag_gaussian(&mu, &lv).unwrap(), 0.0);

        let mu1 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let lv0 = Tensor::zeros(&[1]);
        let kl = kl_diag_gaussian(&mu1, &lv0).unwrap();
        assert!((kl - 0.5).abs() < 1e-7);

        // strictly positive away from (0, 0)
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let mu = Tensor::randn(&[6], 1.0, &mut rng);
            let lv = Tensor::randn(&[6], 0.5, &mut rng);
            assert!(kl_diag_gaussian(&mu, &lv).unwrap() > 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // KL(q || p) = E_q[log q - log p] up to the constant that cancels;
        // estimate with 10^6 draws and compare within 3 standard errors
        let mut rng = SplitMix64::new(123);
        let mu_t = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let lv_t = Tensor::new(vec![2], vec![0.4, -0.6]).unwrap();
        let exact = kl_diag_gaussian(&mu_t, &lv_t).unwrap() as f64;

        let n = 1_000_000usize;
        let mut acc = 0.0f64;
        let mut acc_sq = 0.0f64;
        for _ in 0..n {
            let mut term = 0.0f64;
            for i in 0..2 {
                let mu = mu_t.data()[i] as f64;
                let lv = lv_t.data()[i] as f64;
                let sigma = (0.5 * lv).exp();
                let z = mu + sigma * rng.normal() as f64;
                let lq = -0.5 * ((z - mu) / sigma).powi(2) - 0.5 * lv;
                let lp = -0.5 * z * z;
                term += lq - lp;
            }
            acc += term;
            acc_sq += term * term;
        }
        let mean = acc / n as f64;
        let var = (acc_sq / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * stderr + 1e-4,
            "mc {mean} vs exact {exact} (stderr {stderr})"
        );
    }

    #[test]
    fn vae_single_step_descends() {
        let mut cfg = CodecConfig::desk();
        cfg.mode = CodecMode::TrainedVae;
        let mut codec = Codec::new(cfg).unwrap();
        let videos = vec![random_video(8, 16, 16, 4)];
        let audios = vec![random_audio(1600, 5)];
        let before = {
            let mut probe = codec.clone();
            train_vae(&mut probe, &videos, &audios, 1, 1e-4, 0.0).unwrap()
        };
        train_vae(&mut codec, &videos, &audios, 1, 1e-4, 1e-2).unwrap();
        let after = {
            let mut probe = codec.clone();
            train_vae(&mut probe, &videos, &audios, 1, 1e-4, 0.0).unwrap()
        };
        assert!(after.0 < before.0, "video vae loss {} -> {}", before.0, after.0);
        assert!(after.1 < before.1, "audio vae loss {} -> {}", before.1, after.1);
    }

    #[test]
    fn vae_beta_zero_is_pure_reconstruction() {
        let mut cfg = CodecConfig::desk();
        cfg.mode = CodecMode::TrainedVae;
        let mut codec = Codec::new(cfg.clone()).unwrap();
        let lossless = Codec::new(CodecConfig {
            mode: CodecMode::Lossless,
            ..cfg
        })
        .unwrap();
        let video = random_video(8, 16, 16, 6);
        let vae = codec.vae.as_mut().unwrap();
        let rows = channels_last(&lossless.video_space_to_depth(&video));
        let (loss, recon, _kl) = vae.video.train_step(&rows, 0.0, 0.0, 1).unwrap();
        assert_eq!(loss, recon);
    }

    #[test]
    fn vae_kl_term_nonnegative() {
        let mut cfg = CodecConfig::desk();
        cfg.mode = CodecMode::TrainedVae;
        let mut codec = Codec::new(cfg.clone()).unwrap();
        let lossless = Codec::new(CodecConfig {
            mode: CodecMode::Lossless,
            ..cfg
        })
        .unwrap();
        let video = random_video(8, 16, 16, 10);
        let vae = codec.vae.as_mut().unwrap();
        let rows = channels_last(&lossless.video_space_to_depth(&video));
        let (_, _, kl) = vae.video.train_step(&rows, 1e-4, 1e-3, 2).unwrap();
        assert!(kl >= 0.0);
    }

    #[test]
    fn calibration_picks_power_of_two_near_inverse_std() {
        let mut cfg = CodecConfig::desk();
        // values with std 0.125 want scale 8 = 2^3
        let data: Vec<f32> = (0..16 * 3 * 32 * 32)
            .map(|i| 0.5 + 0.125 * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let v = VideoTensor::new(16, 32, 32, data).unwrap();
        cfg.calibrate(&[v], &[random_audio(1600, 11)]);
        assert_eq!(cfg.video_scale_log2, 3);
    }
}
