//! Rectified flow matching: probability path, velocity targets, mini-batch
//! optimal-transport coupling, the flow-matching loss, an Euler ODE sampler
//! with classifier-free guidance, and latent inversion for zero-shot
//! video-to-audio.
//!
//! The sampler keeps the state as `x0 + (1/N) * sum(v)` with the velocity
//! sum accumulated in f64, so integration of any state-independent field is
//! exact: for a constant field the result equals `x0 + c` bitwise for every
//! step count.

use crate::codec::{AudioLatent, VideoLatent};
use crate::ddit::params::Session;
use crate::ddit::DualDit;
use crate::error::{Error, Result};
use crate::numerics::{SplitMix64, Tensor, Var};
use crate::text::TextCondition;

/// One sample's latents.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub video: VideoLatent,
    pub audio: AudioLatent,
}

/// Sampler state at one step, recorded by the traced samplers.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub video: Tensor,
    pub audio: Tensor,
    pub t: f32,
    pub step: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    T2av,
    V2aInversion,
    AudioOnly,
}

/// Everything a sampling run needs. Shapes are per-sample latent shapes;
/// changing `video_shape`'s spatial dims is how zero-shot resolution works.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub caption: String,
    pub guidance: f32,
    pub steps: usize,
    pub seed: u64,
    pub mode: SampleMode,
    /// [T_v, C_z, H', W'].
    pub video_shape: [usize; 4],
    /// [T_a, D_A].
    pub audio_shape: [usize; 2],
    /// Ground-truth video latent, required for V2A inversion.
    pub video_latent: Option<VideoLatent>,
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        if self.guidance < 0.0 {
            return Err(Error::config(format!(
                "guidance weight {} must be >= 0",
                self.guidance
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("need at least one sampling step".to_string()));
        }
        if self.mode == SampleMode::V2aInversion && self.video_latent.is_none() {
            return Err(Error::config(
                "v2a inversion requires the ground-truth video latent".to_string(),
            ));
        }
        Ok(())
    }
}

/// The default guidance weight and step count used at sampling time.
pub const DEFAULT_GUIDANCE: f32 = 6.0;
pub const DEFAULT_STEPS: usize = 50;

// ---------------------------------------------------------------------------
// path algebra
// ---------------------------------------------------------------------------

/// `x_t = (1 - t) x0 + t x1`. Endpoints are returned exactly.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "interpolate shapes differ: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("interpolation time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// The rectified-flow velocity target `v = x1 - x0`.
pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "velocity shapes differ: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// mini-batch optimal transport
// ---------------------------------------------------------------------------

/// Exact minimum-cost assignment (Hungarian algorithm, O(n^3)).
/// `cost[i][j]` is the cost of pairing row i with column j; returns for each
/// row the assigned column.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Mini-batch OT coupling: finds the permutation pairing each noise item i
/// with data item pi(i) that minimizes the total squared distance. Items
/// are flattened; both modalities of a pair should be concatenated by the
/// caller so one permutation preserves A/V pairing.
pub fn ot_pair(noise: &[Vec<f32>], data: &[Vec<f32>]) -> Result<Vec<usize>> {
    if noise.len() != data.len() {
        return Err(Error::config(format!(
            "ot_pair batch sizes differ: {} vs {}",
            noise.len(),
            data.len()
        )));
    }
    let n = noise.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dim = noise[0].len();
    for row in noise.iter().chain(data.iter()) {
        if row.len() != dim {
            return Err(Error::config("ot_pair items must have equal length".to_string()));
        }
    }
    let mut cost = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f64;
            for (a, b) in noise[i].iter().zip(&data[j]) {
                let d = (*a as f64) - (*b as f64);
                acc += d * d;
            }
            cost[i][j] = acc;
        }
    }
    Ok(hungarian(&cost))
}

/// Total squared-distance cost of a coupling (test and diagnostics helper).
pub fn coupling_cost(noise: &[Vec<f32>], data: &[Vec<f32>], perm: &[usize]) -> f64 {
    let mut acc = 0.0f64;
    for (i, &j) in perm.iter().enumerate() {
        for (a, b) in noise[i].iter().zip(&data[j]) {
            let d = (*a as f64) - (*b as f64);
            acc += d * d;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// flow-matching loss
// ---------------------------------------------------------------------------

/// One OT-coupled training batch: noise endpoints, data endpoints, one time
/// per item (shared by both modalities), and per-item conditions.
#[derive(Debug, Clone)]
pub struct FmBatch {
    /// `[B, T_v, C, H', W']` noise / data.
    pub video0: Tensor,
    pub video1: Tensor,
    /// `[B, T_a, D_A]` noise / data.
    pub audio0: Tensor,
    pub audio1: Tensor,
    pub ts: Vec<f32>,
    pub conds: Vec<TextCondition>,
}

pub struct FmLossVars {
    /// Combined mean over all elements of both modalities.
    pub total: Var,
    /// Per-modality means.
    pub video: Var,
    pub audio: Var,
}

/// Interpolate a batch with one t per item.
pub fn interpolate_batch(x0: &Tensor, x1: &Tensor, ts: &[f32]) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate_batch shape mismatch".to_string()));
    }
    let b = ts.len();
    if x0.shape()[0] != b {
        return Err(Error::shape(format!(
            "batch {} vs {} times",
            x0.shape()[0],
            b
        )));
    }
    let per = x0.numel() / b;
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let dst = &mut out.data_mut()[i * per..(i + 1) * per];
        let src1 = &x1.data()[i * per..(i + 1) * per];
        if t == 0.0 {
            continue;
        }
        if t == 1.0 {
            dst.copy_from_slice(src1);
            continue;
        }
        for (d, &b1) in dst.iter_mut().zip(src1) {
            *d = (1.0 - t) * *d + t * b1;
        }
    }
    Ok(out)
}

/// Builds the taped flow-matching loss for one batch. The caller owns the
/// session so it can backprop and also reach intermediate values.
pub fn fm_loss_taped(model: &DualDit, sess: &mut Session, batch: &FmBatch) -> Result<FmLossVars> {
    let xt_video = interpolate_batch(&batch.video0, &batch.video1, &batch.ts)?;
    let xt_audio = interpolate_batch(&batch.audio0, &batch.audio1, &batch.ts)?;
    let v_video = velocity_target(&batch.video0, &batch.video1)?;
    let v_audio = velocity_target(&batch.audio0, &batch.audio1)?;

    let (pred_v, pred_a) = model.forward_taped(sess, &xt_video, &xt_audio, &batch.ts, &batch.conds)?;

    let target_v = sess.tape.constant(v_video);
    let target_a = sess.tape.constant(v_audio);

    let dv = sess.tape.sub(pred_v, target_v)?;
    let sq_v = sess.tape.mul(dv, dv)?;
    let loss_v = sess.tape.mean_all(sq_v)?;

    let da = sess.tape.sub(pred_a, target_a)?;
    let sq_a = sess.tape.mul(da, da)?;
    let loss_a = sess.tape.mean_all(sq_a)?;

    let nv = batch.video0.numel() as f32;
    let na = batch.audio0.numel() as f32;
    let (total, _) = if model.cfg.audio_only {
        (loss_a, 0.0)
    } else {
        let wv = sess.tape.scale(loss_v, nv / (nv + na))?;
        let wa = sess.tape.scale(loss_a, na / (nv + na))?;
        (sess.tape.add(wv, wa)?, 0.0)
    };

    Ok(FmLossVars {
        total,
        video: loss_v,
        audio: loss_a,
    })
}

/// Plain (untaped) loss evaluation; used by validation.
pub fn fm_loss_eval(model: &DualDit, batch: &FmBatch) -> Result<(f32, f32, f32)> {
    let mut sess = Session::inference(&model.store);
    let vars = fm_loss_taped(model, &mut sess, batch)?;
    Ok((
        sess.tape.value(vars.total).item()?,
        sess.tape.value(vars.video).item()?,
        sess.tape.value(vars.audio).item()?,
    ))
}

// ---------------------------------------------------------------------------
// classifier-free guidance
// ---------------------------------------------------------------------------

/// `u_uncond + w * (u_cond - u_uncond)` per modality. The endpoints w=0 and
/// w=1 return the unconditional / conditional prediction exactly.
pub fn cfg_velocity(
    cond: &(Tensor, Tensor),
    uncond: &(Tensor, Tensor),
    w: f32,
) -> Result<(Tensor, Tensor)> {
    let combine = |c: &Tensor, u: &Tensor| -> Result<Tensor> {
        if c.shape() != u.shape() {
            return Err(Error::shape(format!(
                "cfg shapes differ: {:?} vs {:?}",
                c.shape(),
                u.shape()
            )));
        }
        if w == 0.0 {
            return Ok(u.clone());
        }
        if w == 1.0 {
            return Ok(c.clone());
        }
        let data = u
            .data()
            .iter()
            .zip(c.data())
            .map(|(&uv, &cv)| uv + w * (cv - uv))
            .collect();
        Ok(Tensor::from_parts(c.shape().to_vec(), data))
    };
    Ok((combine(&cond.0, &uncond.0)?, combine(&cond.1, &uncond.1)?))
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// Anything that predicts dual velocities; the model implements this, and
/// tests substitute stub fields.
pub trait VelocityField {
    /// `video: [1, T, C, H, W]`, `audio: [1, T_a, D]`, scalar t, condition.
    fn velocity(
        &self,
        video: &Tensor,
        audio: &Tensor,
        t: f32,
        cond: &TextCondition,
    ) -> Result<(Tensor, Tensor)>;
}

impl VelocityField for DualDit {
    fn velocity(
        &self,
        video: &Tensor,
        audio: &Tensor,
        t: f32,
        cond: &TextCondition,
    ) -> Result<(Tensor, Tensor)> {
        let out = self.forward(video, audio, &[t], std::slice::from_ref(cond))?;
        Ok((out.video, out.audio))
    }
}

/// f64 accumulator that realizes `x0 + (1/n) * sum(v)` as an f32 tensor.
struct EulerState {
    x0: Vec<f64>,
    sum_v: Vec<f64>,
    shape: Vec<usize>,
    n: f64,
}

impl EulerState {
    fn new(x0: &Tensor, steps: usize) -> EulerState {
        EulerState {
            x0: x0.data().iter().map(|&v| v as f64).collect(),
            sum_v: vec![0.0; x0.numel()],
            shape: x0.shape().to_vec(),
            n: steps as f64,
        }
    }

    fn current(&self) -> Tensor {
        let data: Vec<f32> = self
            .x0
            .iter()
            .zip(&self.sum_v)
            .map(|(&x, &s)| (x + s / self.n) as f32)
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    fn add_velocity(&mut self, v: &Tensor) {
        for (s, &vi) in self.sum_v.iter_mut().zip(v.data()) {
            *s += vi as f64;
        }
    }
}

fn draw_noise(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut rng = SplitMix64::derive(seed, tag);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Euler sampling from t=0 to t=1 with classifier-free guidance:
/// `t_k = k/N`, `x <- x + (1/N) * u_hat(x, t_k)`. Deterministic in
/// (seed, request, parameters).
pub fn euler_sample<F: VelocityField>(
    field: &F,
    req: &SampleRequest,
    cond: &TextCondition,
) -> Result<LatentPair> {
    sample_inner(field, req, cond, None)
}

/// As [`euler_sample`] but records the state seen by the model at each step.
pub fn euler_sample_traced<F: VelocityField>(
    field: &F,
    req: &SampleRequest,
    cond: &TextCondition,
) -> Result<(LatentPair, Vec<FlowState>)> {
    let mut trace = Vec::new();
    let pair = sample_inner(field, req, cond, Some(&mut trace))?;
    Ok((pair, trace))
}

/// Zero-shot V2A by latent inversion: the video component of the state is
/// overwritten with `interpolate(x0_video, z1_video, t_k)` before every
/// model call, and only audio integrates its predicted velocity. The
/// returned video latent is `z1_video` exactly.
pub fn v2a_inversion_sample<F: VelocityField>(
    field: &F,
    req: &SampleRequest,
    cond: &TextCondition,
) -> Result<LatentPair> {
    if req.mode != SampleMode::V2aInversion {
        return Err(Error::config("request mode must be v2a-inversion".to_string()));
    }
    sample_inner(field, req, cond, None)
}

fn sample_inner<F: VelocityField>(
    field: &F,
    req: &SampleRequest,
    cond: &TextCondition,
    mut trace: Option<&mut Vec<FlowState>>,
) -> Result<LatentPair> {
    req.validate()?;
    let n = req.steps;
    let [tv, c, h, w] = req.video_shape;
    let [ta, d] = req.audio_shape;
    let video_shape = vec![1, tv, c, h, w];
    let audio_shape = vec![1, ta, d];

    let z1_video: Option<Tensor> = match (&req.mode, &req.video_latent) {
        (SampleMode::V2aInversion, Some(z)) => {
            let mut s = vec![1];
            s.extend_from_slice(z.0.shape());
            Some(z.0.reshaped(s)?)
        }
        _ => None,
    };

    let x0_video = if req.mode == SampleMode::AudioOnly {
        Tensor::zeros(&video_shape)
    } else {
        draw_noise(&video_shape, req.seed, 0x71DE0)
    };
    let x0_audio = draw_noise(&audio_shape, req.seed, 0xA7D10);

    let null = TextCondition::null();
    let mut video_state = EulerState::new(&x0_video, n);
    let mut audio_state = EulerState::new(&x0_audio, n);

    for k in 0..n {
        let t = k as f32 / n as f32;
        let video_now = match &z1_video {
            Some(z1) => interpolate(&x0_video, z1, t)?,
            None => video_state.current(),
        };
        let audio_now = audio_state.current();

        if let Some(sink) = trace.as_deref_mut() {
            sink.push(FlowState {
                video: video_now.clone(),
                audio: audio_now.clone(),
                t,
                step: k,
                steps: n,
            });
        }

        let step_err = |e: crate::error::Error| {
            Error::numerical(format!("sampling aborted at step {k}: {e}"))
        };
        // guidance endpoints skip the forward pass they cannot affect
        let vel = if req.guidance == 0.0 {
            field.velocity(&video_now, &audio_now, t, &null).map_err(step_err)?
        } else if req.guidance == 1.0 {
            field.velocity(&video_now, &audio_now, t, cond).map_err(step_err)?
        } else {
            let v_cond = field
                .velocity(&video_now, &audio_now, t, cond)
                .map_err(step_err)?;
            let v_uncond = field
                .velocity(&video_now, &audio_now, t, &null)
                .map_err(step_err)?;
            cfg_velocity(&v_cond, &v_uncond, req.guidance)?
        };

        video_state.add_velocity(&vel.0);
        audio_state.add_velocity(&vel.1);
    }

    let final_video = match (&req.mode, z1_video) {
        (SampleMode::V2aInversion, Some(z1)) => z1,
        (SampleMode::AudioOnly, _) => Tensor::zeros(&video_shape),
        _ => video_state.current(),
    };
    let final_audio = audio_state.current();
    if !final_video.all_finite() || !final_audio.all_finite() {
        return Err(Error::numerical(format!(
            "non-finite sample state after {n} steps"
        )));
    }

    Ok(LatentPair {
        video: VideoLatent(final_video.reshaped(vec![tv, c, h, w])?),
        audio: AudioLatent(final_audio.reshaped(vec![ta, d])?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddit::TowerConfig;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut SplitMix64::new(seed))
    }

    #[test]
    fn interpolate_endpoints_exact() {
        let x0 = rand_tensor(&[3, 4], 1);
        let x1 = rand_tensor(&[3, 4], 2);
        assert!(interpolate(&x0, &x1, 0.0).unwrap().bit_eq(&x0));
        assert!(interpolate(&x0, &x1, 1.0).unwrap().bit_eq(&x1));
    }

    #[test]
    fn interpolate_midpoint() {
        let x0 = Tensor::zeros(&[5]);
        let x1 = Tensor::full(&[5], 2.0);
        let mid = interpolate(&x0, &x1, 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn interpolate_monotone_in_t() {
        let x0 = Tensor::zeros(&[4]);
        let x1 = Tensor::full(&[4], 3.0);
        let mut prev = -1.0f32;
        for i in 0..=10 {
            let t = i as f32 / 10.0;
            let x = interpolate(&x0, &x1, t).unwrap();
            assert!(x.data()[0] >= prev);
            prev = x.data()[0];
        }
    }

    #[test]
    fn velocity_identity_holds() {
        // x1 == interpolate(x0, x1, t) + (1 - t) * v for random triples
        let mut rng = SplitMix64::new(9);
        for trial in 0..100 {
            let x0 = Tensor::randn(&[6], 1.0, &mut rng);
            let x1 = Tensor::randn(&[6], 1.0, &mut rng);
            let t = rng.next_f32();
            let v = velocity_target(&x0, &x1).unwrap();
            let xt = interpolate(&x0, &x1, t).unwrap();
            for i in 0..6 {
                let recon = xt.data()[i] + (1.0 - t) * v.data()[i];
                assert!(
                    (recon - x1.data()[i]).abs() < 1e-6,
                    "trial {trial}: {recon} vs {}",
                    x1.data()[i]
                );
            }
        }
    }

    #[test]
    fn velocity_target_edge_cases() {
        let x = rand_tensor(&[4], 3);
        let v = velocity_target(&x, &x).unwrap();
        assert!(v.data().iter().all(|&z| z == 0.0));
        let zero = Tensor::zeros(&[4]);
        let v = velocity_target(&zero, &x).unwrap();
        assert!(v.bit_eq(&x));
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn ot_singleton_and_identical_batches() {
        let a = random_batch(1, 4, 5);
        assert_eq!(ot_pair(&a, &a).unwrap(), vec![0]);
        let b = random_batch(6, 4, 6);
        assert_eq!(ot_pair(&b, &b).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(coupling_cost(&b, &b, &ot_pair(&b, &b).unwrap()), 0.0);
    }

    /// Exhaustive permutation oracle.
    fn brute_force_min_cost(noise: &[Vec<f32>], data: &[Vec<f32>]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&x| x).collect();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(noise.len())
            .into_iter()
            .map(|p| coupling_cost(noise, data, &p))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn ot_matches_exhaustive_minimum_n5() {
        for trial in 0..100 {
            let noise = random_batch(5, 3, 100 + trial);
            let data = random_batch(5, 3, 200 + trial);
            let perm = ot_pair(&noise, &data).unwrap();
            let got = coupling_cost(&noise, &data, &perm);
            let best = brute_force_min_cost(&noise, &data);
            assert!(
                (got - best).abs() < 1e-9,
                "trial {trial}: hungarian {got} vs brute force {best}"
            );
        }
    }

    #[test]
    fn ot_never_beats_identity_coupling() {
        for trial in 0..20 {
            let noise = random_batch(8, 5, 300 + trial);
            let data = random_batch(8, 5, 400 + trial);
            let perm = ot_pair(&noise, &data).unwrap();
            let identity: Vec<usize> = (0..8).collect();
            assert!(
                coupling_cost(&noise, &data, &perm)
                    <= coupling_cost(&noise, &data, &identity) + 1e-12
            );
        }
    }

    #[test]
    fn ot_unequal_batches_error() {
        let a = random_batch(3, 2, 7);
        let b = random_batch(4, 2, 8);
        assert!(ot_pair(&a, &b).is_err());
    }

    fn tiny_fm_batch(b: usize, seed: u64) -> FmBatch {
        let cfg = TowerConfig::tiny();
        let mut rng = SplitMix64::new(seed);
        let vshape = [b, cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w];
        let ashape = [b, cfg.t_a, cfg.d_a];
        let vocab = crate::text::Vocab::synthetic();
        FmBatch {
            video0: Tensor::randn(&vshape, 1.0, &mut rng),
            video1: Tensor::randn(&vshape, 1.0, &mut rng),
            audio0: Tensor::randn(&ashape, 1.0, &mut rng),
            audio1: Tensor::randn(&ashape, 1.0, &mut rng),
            ts: (0..b).map(|i| (i as f32 + 0.5) / (b as f32 + 1.0)).collect(),
            conds: (0..b)
                .map(|_| TextCondition::from_caption(&vocab, "a red ball bouncing fast"))
                .collect(),
        }
    }

    #[test]
    fn fm_loss_zero_when_targets_are_zero() {
        // zero-init model predicts zero; with x0 == x1 the target is zero too
        let model = DualDit::new(TowerConfig::tiny()).unwrap();
        let mut batch = tiny_fm_batch(2, 11);
        batch.video1 = batch.video0.clone();
        batch.audio1 = batch.audio0.clone();
        let (total, lv, la) = fm_loss_eval(&model, &batch).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(lv, 0.0);
        assert_eq!(la, 0.0);
    }

    #[test]
    fn fm_loss_at_zero_init_equals_target_energy() {
        let model = DualDit::new(TowerConfig::tiny()).unwrap();
        let batch = tiny_fm_batch(2, 12);
        let (total, lv, la) = fm_loss_eval(&model, &batch).unwrap();

        // direct computation from the targets
        let vv = velocity_target(&batch.video0, &batch.video1).unwrap();
        let va = velocity_target(&batch.audio0, &batch.audio1).unwrap();
        let energy = |t: &Tensor| -> f64 {
            t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
        };
        let nv = vv.numel() as f64;
        let na = va.numel() as f64;
        let expect_v = energy(&vv) / nv;
        let expect_a = energy(&va) / na;
        let expect_total = (energy(&vv) + energy(&va)) / (nv + na);
        assert!((lv as f64 - expect_v).abs() < 1e-4, "{lv} vs {expect_v}");
        assert!((la as f64 - expect_a).abs() < 1e-4);
        assert!((total as f64 - expect_total).abs() < 1e-4);
    }

    #[test]
    fn fm_loss_batch_order_invariant() {
        let model = DualDit::new(TowerConfig::tiny()).unwrap();
        let batch = tiny_fm_batch(2, 13);
        let (t1, _, _) = fm_loss_eval(&model, &batch).unwrap();
        // swap the two items everywhere
        let swap = |t: &Tensor| -> Tensor {
            let per = t.numel() / 2;
            let mut d = t.data().to_vec();
            d.rotate_left(per);
            Tensor::from_parts(t.shape().to_vec(), d)
        };
        let swapped = FmBatch {
            video0: swap(&batch.video0),
            video1: swap(&batch.video1),
            audio0: swap(&batch.audio0),
            audio1: swap(&batch.audio1),
            ts: batch.ts.iter().rev().cloned().collect(),
            conds: batch.conds.clone(),
        };
        let (t2, _, _) = fm_loss_eval(&model, &swapped).unwrap();
        // equal up to float reassociation of the mean
        assert!((t1 - t2).abs() < 1e-5 * t1.abs().max(1.0), "{t1} vs {t2}");
    }

    #[test]
    fn cfg_endpoints_exact_and_linear() {
        let c = (rand_tensor(&[3, 3], 20), rand_tensor(&[2, 4], 21));
        let u = (rand_tensor(&[3, 3], 22), rand_tensor(&[2, 4], 23));
        let w0 = cfg_velocity(&c, &u, 0.0).unwrap();
        assert!(w0.0.bit_eq(&u.0) && w0.1.bit_eq(&u.1));
        let w1 = cfg_velocity(&c, &u, 1.0).unwrap();
        assert!(w1.0.bit_eq(&c.0) && w1.1.bit_eq(&c.1));

        // linearity: u_hat(w) - u_hat(0) == w * (u_hat(1) - u_hat(0))
        for &w in &[2.0f32, 4.0, 6.0, 8.0] {
            let uw = cfg_velocity(&c, &u, w).unwrap();
            for ((a, b), (cv, uv)) in uw
                .0
                .data()
                .iter()
                .zip(u.0.data())
                .zip(c.0.data().iter().zip(u.0.data()))
            {
                let lhs = a - b;
                let rhs = w * (cv - uv);
                assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1.0));
            }
        }
    }

    /// Stub with a constant velocity everywhere.
    struct ConstantField {
        v_video: f32,
        v_audio: f32,
    }

    impl VelocityField for ConstantField {
        fn velocity(
            &self,
            video: &Tensor,
            audio: &Tensor,
            _t: f32,
            _cond: &TextCondition,
        ) -> Result<(Tensor, Tensor)> {
            Ok((
                Tensor::full(video.shape(), self.v_video),
                Tensor::full(audio.shape(), self.v_audio),
            ))
        }
    }

    fn stub_request(steps: usize, mode: SampleMode) -> SampleRequest {
        SampleRequest {
            caption: "a red ball bouncing fast".to_string(),
            guidance: 1.0,
            steps,
            seed: 42,
            mode,
            video_shape: [2, 3, 4, 4],
            audio_shape: [5, 6],
            video_latent: None,
        }
    }

    #[test]
    fn euler_constant_field_is_exact_for_any_step_count() {
        let field = ConstantField {
            v_video: 0.75,
            v_audio: -0.375,
        };
        let cond = TextCondition::null();
        let mut results = Vec::new();
        for &n in &[1usize, 7, 50] {
            let req = stub_request(n, SampleMode::T2av);
            let pair = euler_sample(&field, &req, &cond).unwrap();
            results.push(pair);
        }
        // x0 + c, computed independently
        let x0v = draw_noise(&[1, 2, 3, 4, 4], 42, 0x71DE0);
        let x0a = draw_noise(&[1, 5, 6], 42, 0xA7D10);
        for pair in &results {
            for (out, &x0) in pair.video.0.data().iter().zip(x0v.data()) {
                let expect = ((x0 as f64) + 0.75) as f32;
                assert_eq!(out.to_bits(), expect.to_bits());
            }
            for (out, &x0) in pair.audio.0.data().iter().zip(x0a.data()) {
                let expect = ((x0 as f64) + (-0.375f32 as f64)) as f32;
                assert_eq!(out.to_bits(), expect.to_bits());
            }
        }
        // all step counts agree bitwise
        for pair in &results[1..] {
            assert!(pair.video.0.bit_eq(&results[0].video.0));
            assert!(pair.audio.0.bit_eq(&results[0].audio.0));
        }
    }

    #[test]
    fn euler_deterministic_in_seed() {
        let field = ConstantField {
            v_video: 0.1,
            v_audio: 0.2,
        };
        let cond = TextCondition::null();
        let req = stub_request(10, SampleMode::T2av);
        let a = euler_sample(&field, &req, &cond).unwrap();
        let b = euler_sample(&field, &req, &cond).unwrap();
        assert!(a.video.0.bit_eq(&b.video.0));
        assert!(a.audio.0.bit_eq(&b.audio.0));
        let mut req2 = req.clone();
        req2.seed = 43;
        let c = euler_sample(&field, &req2, &cond).unwrap();
        assert!(!a.video.0.bit_eq(&c.video.0));
    }

    #[test]
    fn sample_request_validation() {
        let mut req = stub_request(0, SampleMode::T2av);
        assert!(req.validate().is_err());
        req.steps = 5;
        req.guidance = -1.0;
        assert!(req.validate().is_err());
        req.guidance = 6.0;
        assert!(req.validate().is_ok());
        let v2a = stub_request(5, SampleMode::V2aInversion);
        assert!(v2a.validate().is_err(), "missing ground-truth latent");
    }

    #[test]
    fn v2a_returns_ground_truth_video_exactly() {
        let field = ConstantField {
            v_video: 0.3,
            v_audio: 0.1,
        };
        let cond = TextCondition::null();
        let mut req = stub_request(8, SampleMode::V2aInversion);
        let z1 = rand_tensor(&[2, 3, 4, 4], 99);
        req.video_latent = Some(VideoLatent(z1.clone()));
        let pair = v2a_inversion_sample(&field, &req, &cond).unwrap();
        assert!(pair.video.0.bit_eq(&z1));
    }

    #[test]
    fn v2a_model_sees_noisy_interpolant_each_step() {
        let field = ConstantField {
            v_video: 0.0,
            v_audio: 0.0,
        };
        let cond = TextCondition::null();
        let mut req = stub_request(5, SampleMode::V2aInversion);
        let z1 = rand_tensor(&[2, 3, 4, 4], 77);
        req.video_latent = Some(VideoLatent(z1.clone()));
        let (_, trace) = euler_sample_traced(&field, &req, &cond).unwrap();
        assert_eq!(trace.len(), 5);
        let x0 = draw_noise(&[1, 2, 3, 4, 4], req.seed, 0x71DE0);
        let mut z1b = vec![1usize];
        z1b.extend_from_slice(z1.shape());
        let z1 = z1.reshaped(z1b).unwrap();
        for (k, state) in trace.iter().enumerate() {
            let t = k as f32 / 5.0;
            assert_eq!(state.t, t);
            let expect = interpolate(&x0, &z1, t).unwrap();
            assert!(state.video.bit_eq(&expect), "step {k}");
        }
    }

    #[test]
    fn audio_only_mode_returns_zero_video() {
        let field = ConstantField {
            v_video: 0.5,
            v_audio: 0.25,
        };
        let cond = TextCondition::null();
        let req = stub_request(4, SampleMode::AudioOnly);
        let pair = euler_sample(&field, &req, &cond).unwrap();
        assert!(pair.video.0.data().iter().all(|&v| v == 0.0));
        assert!(pair.audio.0.data().iter().any(|&v| v != 0.0));
    }

    /// Stub whose velocity depends only on t; Euler must integrate it the
    /// same for fine and coarse grids up to f64 quadrature differences.
    struct TimeField;

    impl VelocityField for TimeField {
        fn velocity(
            &self,
            video: &Tensor,
            audio: &Tensor,
            t: f32,
            _cond: &TextCondition,
        ) -> Result<(Tensor, Tensor)> {
            Ok((
                Tensor::full(video.shape(), 2.0 * t),
                Tensor::full(audio.shape(), -t),
            ))
        }
    }

    #[test]
    fn euler_left_endpoint_rule_on_time_field() {
        // with v(t) = 2t the left-endpoint sum is 2 * (1/N) * sum k/N
        //             = (N-1)/N
        let cond = TextCondition::null();
        for &n in &[4usize, 10] {
            let req = stub_request(n, SampleMode::T2av);
            let pair = euler_sample(&TimeField, &req, &cond).unwrap();
            let x0 = draw_noise(&[1, 2, 3, 4, 4], 42, 0x71DE0);
            let expect_inc = (n as f64 - 1.0) / n as f64;
            for (out, &x0) in pair.video.0.data().iter().zip(x0.data()) {
                let expect = ((x0 as f64) + expect_inc) as f32;
                assert!((out - expect).abs() < 1e-6);
            }
        }
    }
}
