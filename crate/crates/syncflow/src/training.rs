//! Modality-decoupled three-stage training.
//!
//! Stage 1 pretrains the video tower (with the text encoder) on the video
//! loss. Stage 2 adapts the audio tower and adaptors while the video tower
//! stays frozen; video latents are still noised with the shared t and run
//! through the frozen tower so the audio side trains on the same feature
//! distribution it sees at sampling time, but the video loss is not
//! backpropagated. Stage 3 fine-tunes everything jointly.
//!
//! Validation uses a fixed t grid and fixed noise seeds so loss curves are
//! exactly comparable across runs.

use std::io::Write as IoWrite;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::ddit::params::{ParamGroup, ParamId, Session};
use crate::ddit::DualDit;
use crate::error::{Error, Result};
use crate::io::LoadedSample;
use crate::numerics::{SplitMix64, Tensor};
use crate::rfm::{fm_loss_taped, ot_pair, FmBatch};
use crate::text::{TextCondition, Vocab};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Validation time grid: t in {0.1, ..., 0.9}.
pub const VAL_T_GRID: [f32; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    VideoPretrain,
    AudioAdapt,
    JointFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::VideoPretrain => "video",
            Stage::AudioAdapt => "audio",
            Stage::JointFinetune => "joint",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        match s {
            "video" => Some(Stage::VideoPretrain),
            "audio" => Some(Stage::AudioAdapt),
            "joint" => Some(Stage::JointFinetune),
            _ => None,
        }
    }

    /// Default trainable groups. Stage 3 fine-tunes the text encoder too.
    pub fn default_trainable(self, audio_only: bool) -> Vec<ParamGroup> {
        match self {
            Stage::VideoPretrain => vec![ParamGroup::VideoTower, ParamGroup::TextEncoder],
            Stage::AudioAdapt => {
                if audio_only {
                    // the audio-only ablation trains its text conditioning
                    vec![
                        ParamGroup::AudioTower,
                        ParamGroup::Adaptors,
                        ParamGroup::TextEncoder,
                    ]
                } else {
                    vec![ParamGroup::AudioTower, ParamGroup::Adaptors]
                }
            }
            Stage::JointFinetune => ParamGroup::ALL.to_vec(),
        }
    }

    /// Per-modality loss weights of the stage objective.
    fn loss_weights(self, lambda_video: f32, lambda_audio: f32) -> (f32, f32) {
        match self {
            Stage::VideoPretrain => (1.0, 0.0),
            Stage::AudioAdapt => (0.0, 1.0),
            Stage::JointFinetune => (lambda_video, lambda_audio),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_dropout")]
    pub text_dropout: f32,
    #[serde(default = "default_lambda")]
    pub lambda_video: f32,
    #[serde(default = "default_lambda")]
    pub lambda_audio: f32,
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
}

fn default_batch() -> usize {
    8
}

fn default_lr() -> f32 {
    1e-3
}

fn default_warmup() -> usize {
    100
}

fn default_dropout() -> f32 {
    0.10
}

fn default_lambda() -> f32 {
    1.0
}

fn default_val_interval() -> usize {
    500
}

impl StageSpec {
    pub fn new(stage: Stage, steps: usize) -> StageSpec {
        StageSpec {
            stage,
            steps,
            batch_size: default_batch(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            text_dropout: default_dropout(),
            lambda_video: default_lambda(),
            lambda_audio: default_lambda(),
            val_interval: default_val_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("stage needs at least one step".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::config(format!(
                "text dropout {} outside [0, 1]",
                self.text_dropout
            )));
        }
        Ok(())
    }
}

/// A dataset encoded into latents once, ready for batching.
#[derive(Debug, Clone)]
pub struct EncodedData {
    /// Per-sample `[T_v, C, H', W']`.
    pub video: Vec<Tensor>,
    /// Per-sample `[T_a, D_A]`.
    pub audio: Vec<Tensor>,
    pub conds: Vec<TextCondition>,
}

impl EncodedData {
    pub fn from_samples(codec: &Codec, vocab: &Vocab, samples: &[LoadedSample]) -> Result<EncodedData> {
        let mut video = Vec::with_capacity(samples.len());
        let mut audio = Vec::with_capacity(samples.len());
        let mut conds = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let mut rng = SplitMix64::derive(0xE4C0DE, i as u64);
            video.push(codec.encode_video(&s.video, &mut rng)?.0);
            audio.push(codec.encode_audio(&s.audio, &mut rng)?.0);
            conds.push(TextCondition::from_caption(vocab, &s.caption));
        }
        Ok(EncodedData {
            video,
            audio,
            conds,
        })
    }

    pub fn len(&self) -> usize {
        self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }
}

/// Adam with bias correction; one slot per parameter, updated only for
/// trainable groups.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &DualDit) -> AdamState {
        let m = model
            .store
            .entries()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    fn update(
        &mut self,
        model: &mut DualDit,
        grads: &[(ParamId, Tensor)],
        lr: f32,
    ) {
        self.step += 1;
        let b1c = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = model.store.get_mut(*id);
            for ((pi, gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / b1c;
                let vhat = *vi / b2c;
                *pi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub steps: u64,
}

/// Mutable training state carried across steps and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub rng: SplitMix64,
    pub step_in_stage: u64,
    pub stage_history: Vec<StageRecord>,
}

impl TrainState {
    pub fn fresh(model: &DualDit, seed: u64) -> TrainState {
        TrainState {
            adam: AdamState::new(model),
            rng: SplitMix64::new(seed),
            step_in_stage: 0,
            stage_history: Vec::new(),
        }
    }
}

/// One CSV row of the loss curve.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: u64,
    pub loss_video: f32,
    pub loss_audio: f32,
    pub val_loss_video: f32,
    pub val_loss_audio: f32,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub curve: Vec<CurvePoint>,
    pub first_val: (f32, f32),
    pub final_val: (f32, f32),
    pub final_train: (f32, f32),
    /// How many items had their caption dropped to the null condition.
    pub null_condition_uses: u64,
}

pub const CSV_HEADER: &str = "step,loss_video,loss_audio,val_loss_video,val_loss_audio";

/// Deterministic validation: fixed t grid, fixed noise per (item, t) pair.
/// Returns (video loss, audio loss) averaged over the grid.
pub fn validate(model: &DualDit, val: &EncodedData) -> Result<(f32, f32)> {
    if val.is_empty() {
        return Err(Error::config("validation split is empty".to_string()));
    }
    let chunk = 8usize;
    let mut sum_v = 0.0f64;
    let mut sum_a = 0.0f64;
    let mut n_batches = 0.0f64;
    for (ti, &t) in VAL_T_GRID.iter().enumerate() {
        let mut idx = 0usize;
        while idx < val.len() {
            let hi = (idx + chunk).min(val.len());
            let items: Vec<usize> = (idx..hi).collect();
            let batch = build_val_batch(val, &items, t, ti as u64)?;
            let mut sess = Session::inference(&model.store);
            let vars = fm_loss_taped(model, &mut sess, &batch)?;
            sum_v += sess.tape.value(vars.video).item()? as f64;
            sum_a += sess.tape.value(vars.audio).item()? as f64;
            n_batches += 1.0;
            idx = hi;
        }
    }
    Ok(((sum_v / n_batches) as f32, (sum_a / n_batches) as f32))
}

fn build_val_batch(val: &EncodedData, items: &[usize], t: f32, t_idx: u64) -> Result<FmBatch> {
    let mut v0 = Vec::with_capacity(items.len());
    let mut a0 = Vec::with_capacity(items.len());
    let mut v1 = Vec::with_capacity(items.len());
    let mut a1 = Vec::with_capacity(items.len());
    let mut conds = Vec::with_capacity(items.len());
    for &i in items {
        let mut rng = SplitMix64::derive(0x7A11D, (i as u64) << 8 | t_idx);
        v0.push(Tensor::randn(val.video[i].shape(), 1.0, &mut rng));
        a0.push(Tensor::randn(val.audio[i].shape(), 1.0, &mut rng));
        v1.push(val.video[i].clone());
        a1.push(val.audio[i].clone());
        conds.push(val.conds[i].clone());
    }
    Ok(FmBatch {
        video0: Tensor::stack(&v0.iter().collect::<Vec<_>>())?,
        video1: Tensor::stack(&v1.iter().collect::<Vec<_>>())?,
        audio0: Tensor::stack(&a0.iter().collect::<Vec<_>>())?,
        audio1: Tensor::stack(&a1.iter().collect::<Vec<_>>())?,
        ts: vec![t; items.len()],
        conds,
    })
}

/// Runs one stage. Emits CSV rows (header + one row per validation point)
/// to `csv`, mutates the model parameters and training state in place.
pub fn train_stage(
    model: &mut DualDit,
    train: &EncodedData,
    val: &EncodedData,
    spec: &StageSpec,
    state: &mut TrainState,
    csv: &mut dyn IoWrite,
) -> Result<StageReport> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::config("training split is empty".to_string()));
    }
    let trainable = spec.stage.default_trainable(model.cfg.audio_only);
    if trainable.is_empty() {
        return Err(Error::config("no trainable groups in this stage".to_string()));
    }
    model.store.set_trainable_groups(&trainable);
    let (lambda_v, lambda_a) = spec.stage.loss_weights(spec.lambda_video, spec.lambda_audio);

    if state.step_in_stage == 0 {
        writeln!(csv, "{CSV_HEADER}").map_err(Error::Io)?;
    }

    let mut report = StageReport {
        curve: Vec::new(),
        first_val: (0.0, 0.0),
        final_val: (0.0, 0.0),
        final_train: (0.0, 0.0),
        null_condition_uses: 0,
    };

    let mut last_train = (0.0f32, 0.0f32);
    let emit = |step: u64,
                    train_losses: (f32, f32),
                    model: &DualDit,
                    report: &mut StageReport,
                    csv: &mut dyn IoWrite|
     -> Result<(f32, f32)> {
        let (vv, va) = validate(model, val)?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            step, train_losses.0, train_losses.1, vv, va
        )
        .map_err(Error::Io)?;
        report.curve.push(CurvePoint {
            step,
            loss_video: train_losses.0,
            loss_audio: train_losses.1,
            val_loss_video: vv,
            val_loss_audio: va,
        });
        Ok((vv, va))
    };

    // validation of the incoming parameters before any step
    if state.step_in_stage == 0 {
        report.first_val = emit(0, (0.0, 0.0), model, &mut report, csv)?;
    }

    let start = state.step_in_stage;
    for local in start..spec.steps as u64 {
        let batch = draw_batch(train, spec, state, &mut report.null_condition_uses)?;

        let mut sess = Session::new(&model.store);
        let vars = fm_loss_taped(model, &mut sess, &batch)?;
        let root = match spec.stage {
            Stage::VideoPretrain => vars.video,
            Stage::AudioAdapt => vars.audio,
            Stage::JointFinetune => {
                let wv = sess.tape.scale(vars.video, lambda_v)?;
                let wa = sess.tape.scale(vars.audio, lambda_a)?;
                sess.tape.add(wv, wa)?
            }
        };
        let loss_v = sess.tape.value(vars.video).item()?;
        let loss_a = sess.tape.value(vars.audio).item()?;
        if !loss_v.is_finite() || !loss_a.is_finite() {
            return Err(Error::numerical(format!(
                "loss diverged at step {local}; parameters kept at last good state"
            )));
        }
        last_train = (loss_v, loss_a);

        let grads = sess.tape.backward(root)?;
        let mut updates: Vec<(ParamId, Tensor)> = Vec::new();
        for id in model.store.trainable_ids() {
            if let Some(leaf) = sess.leaf_of(id) {
                if let Some(g) = grads.get(leaf) {
                    updates.push((id, g.clone()));
                }
            }
        }
        drop(sess);

        // linear warmup
        let warm = if spec.warmup_steps > 0 {
            ((local + 1) as f32 / spec.warmup_steps as f32).min(1.0)
        } else {
            1.0
        };
        state.adam.update(model, &updates, spec.lr * warm);
        state.step_in_stage = local + 1;

        let done = state.step_in_stage == spec.steps as u64;
        if state.step_in_stage % spec.val_interval as u64 == 0 || done {
            let vals = emit(state.step_in_stage, last_train, model, &mut report, csv)?;
            if done {
                report.final_val = vals;
            }
        }
    }

    report.final_train = last_train;
    state.stage_history.push(StageRecord {
        stage: spec.stage.name().to_string(),
        steps: state.step_in_stage,
    });
    state.step_in_stage = 0;
    Ok(report)
}

/// Draw an OT-coupled, text-dropped batch.
fn draw_batch(
    train: &EncodedData,
    spec: &StageSpec,
    state: &mut TrainState,
    null_uses: &mut u64,
) -> Result<FmBatch> {
    let b = spec.batch_size;
    let rng = &mut state.rng;

    let data_idx: Vec<usize> = (0..b).map(|_| rng.below(train.len())).collect();
    let v_noise: Vec<Tensor> = (0..b)
        .map(|_| Tensor::randn(train.video[0].shape(), 1.0, rng))
        .collect();
    let a_noise: Vec<Tensor> = (0..b)
        .map(|_| Tensor::randn(train.audio[0].shape(), 1.0, rng))
        .collect();

    // shared-permutation OT coupling over concatenated (video, audio) pairs
    let flatten = |v: &Tensor, a: &Tensor| -> Vec<f32> {
        let mut out = Vec::with_capacity(v.numel() + a.numel());
        out.extend_from_slice(v.data());
        out.extend_from_slice(a.data());
        out
    };
    let noise_rows: Vec<Vec<f32>> = (0..b).map(|i| flatten(&v_noise[i], &a_noise[i])).collect();
    let data_rows: Vec<Vec<f32>> = data_idx
        .iter()
        .map(|&j| flatten(&train.video[j], &train.audio[j]))
        .collect();
    let perm = ot_pair(&noise_rows, &data_rows)?;

    let ts: Vec<f32> = (0..b).map(|_| rng.next_f32()).collect();

    let mut v1 = Vec::with_capacity(b);
    let mut a1 = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    for i in 0..b {
        let j = data_idx[perm[i]];
        v1.push(&train.video[j]);
        a1.push(&train.audio[j]);
        let dropped = rng.next_f32() < spec.text_dropout;
        if dropped {
            *null_uses += 1;
            conds.push(TextCondition::null());
        } else {
            conds.push(train.conds[j].clone());
        }
    }

    Ok(FmBatch {
        video0: Tensor::stack(&v_noise.iter().collect::<Vec<_>>())?,
        video1: Tensor::stack(&v1)?,
        audio0: Tensor::stack(&a_noise.iter().collect::<Vec<_>>())?,
        audio1: Tensor::stack(&a1)?,
        ts,
        conds,
    })
}
