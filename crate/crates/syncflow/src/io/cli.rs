//! Command-line surface: gen-data, train, sample, eval, inspect.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data/format,
//! 4 numerical failure. The sampling seed resolves as flag > SYNCFLOW_SEED
//! environment variable > config file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::codec::Codec;
use crate::ddit::params::ParamGroup;
use crate::ddit::DualDit;
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::io::{load_sample_dir, load_split, write_splits, RunConfig};
use crate::numerics::SplitMix64;
use crate::rfm::{euler_sample, v2a_inversion_sample, SampleMode, SampleRequest};
use crate::synthdata;
use crate::text::{TextCondition, Vocab};
use crate::training::{train_stage, EncodedData, Stage, TrainState};

const USAGE: &str = "usage: syncflow <command> [flags]

commands:
  gen-data --out DIR [--config FILE]
      write train/val/test splits of the synthetic paired dataset
  train --stage {video|audio|joint} --data DIR --ckpt-out FILE
        [--config FILE] [--ckpt-in FILE] [--losses FILE]
      run one training stage; writes a loss-curve CSV next to the checkpoint
  sample --ckpt FILE --out DIR [--mode {t2av|v2a|audio-only}]
         [--caption TEXT] [--guidance W] [--steps N] [--seed K]
         [--video DIR] [--resolution HxW] [--config FILE]
      generate one clip and decode it to frames + WAV
  eval --gen DIR --ref DIR --out FILE [--config FILE]
      score generated samples against a reference split
  inspect --ckpt FILE
      print checkpoint configuration, parameter counts, stage history";

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        return Err(Error::usage("missing subcommand".to_string()));
    };
    let flags = parse_flags(&args[1..])?;
    match cmd.as_str() {
        "gen-data" => gen_data(&flags),
        "train" => train(&flags),
        "sample" => sample(&flags),
        "eval" => eval_cmd(&flags),
        "inspect" => inspect(&flags),
        other => Err(Error::usage(format!("unknown subcommand '{other}'"))),
    }
}

fn parse_flags(args: &[String]) -> Result<HashMap<String, String>> {
    let mut flags = HashMap::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if !a.starts_with("--") {
            return Err(Error::usage(format!("unexpected argument '{a}'")));
        }
        let key = a[2..].to_string();
        let Some(value) = args.get(i + 1) else {
            return Err(Error::usage(format!("flag --{key} needs a value")));
        };
        flags.insert(key, value.clone());
        i += 2;
    }
    Ok(flags)
}

fn require<'a>(flags: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    flags
        .get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::usage(format!("missing required flag --{key}")))
}

fn load_config(flags: &HashMap<String, String>) -> Result<RunConfig> {
    let cfg = match flags.get("config") {
        Some(path) => RunConfig::from_file(Path::new(path))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn gen_data(flags: &HashMap<String, String>) -> Result<()> {
    check_flags(flags, &["out", "config"])?;
    let cfg = load_config(flags)?;
    let out = PathBuf::from(require(flags, "out")?);
    let ds = synthdata::make_splits(
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test,
        cfg.data.master_seed,
    )?;
    write_splits(&ds, &out)?;
    Vocab::synthetic().write(&out.join("vocab.txt"))?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train(flags: &HashMap<String, String>) -> Result<()> {
    check_flags(
        flags,
        &["stage", "data", "ckpt-out", "config", "ckpt-in", "losses"],
    )?;
    let cfg = load_config(flags)?;
    let stage = Stage::from_name(require(flags, "stage")?)
        .ok_or_else(|| Error::usage("stage must be video, audio, or joint".to_string()))?;
    let data_dir = PathBuf::from(require(flags, "data")?);
    let ckpt_out = PathBuf::from(require(flags, "ckpt-out")?);

    let train_samples = load_split(&data_dir.join("train"))?;
    let val_samples = load_split(&data_dir.join("val"))?;

    let (mut model, codec, mut state) = match flags.get("ckpt-in") {
        Some(path) => {
            let ckpt = load_checkpoint(Path::new(path), Some(&cfg.tower))?;
            (ckpt.model, ckpt.codec, ckpt.state)
        }
        None => {
            let mut codec_cfg = cfg.codec.clone();
            let videos: Vec<_> = train_samples.iter().map(|s| s.video.clone()).collect();
            let audios: Vec<_> = train_samples.iter().map(|s| s.audio.clone()).collect();
            codec_cfg.calibrate(&videos, &audios);
            let codec = Codec::new(codec_cfg)?;
            let model = DualDit::new(cfg.tower.clone())?;
            let state = TrainState::fresh(&model, cfg.data.master_seed ^ 0x7e41);
            (model, codec, state)
        }
    };

    let vocab = Vocab::synthetic();
    let train_data = EncodedData::from_samples(&codec, &vocab, &train_samples)?;
    let val_data = EncodedData::from_samples(&codec, &vocab, &val_samples)?;
    check_geometry(&model, &train_data)?;

    let spec = cfg.stage.for_stage(stage);
    let losses_path = match flags.get("losses") {
        Some(p) => PathBuf::from(p),
        None => ckpt_out.with_extension("losses.csv"),
    };
    let mut csv = Vec::new();
    let report = train_stage(&mut model, &train_data, &val_data, spec, &mut state, &mut csv)?;
    crate::io::atomic_write(&losses_path, &csv)?;
    save_checkpoint(&ckpt_out, &model, &codec, &state)?;
    println!(
        "stage {} done: train loss (v {:.5}, a {:.5}); val loss (v {:.5}, a {:.5}); ckpt {}",
        stage.name(),
        report.final_train.0,
        report.final_train.1,
        report.final_val.0,
        report.final_val.1,
        ckpt_out.display()
    );
    Ok(())
}

fn check_geometry(model: &DualDit, data: &EncodedData) -> Result<()> {
    let v = data.video[0].shape();
    let cfg = &model.cfg;
    if v != [cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w] {
        return Err(Error::config(format!(
            "encoded video latent {v:?} does not match tower geometry \
             [{}, {}, {}, {}]; adjust the tower section",
            cfg.t_v, cfg.video_channels, cfg.grid_h, cfg.grid_w
        )));
    }
    let a = data.audio[0].shape();
    if a != [cfg.t_a, cfg.d_a] {
        return Err(Error::config(format!(
            "encoded audio latent {a:?} does not match tower geometry [{}, {}]",
            cfg.t_a, cfg.d_a
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

fn sample(flags: &HashMap<String, String>) -> Result<()> {
    check_flags(
        flags,
        &[
            "ckpt",
            "out",
            "mode",
            "caption",
            "guidance",
            "steps",
            "seed",
            "video",
            "resolution",
            "config",
        ],
    )?;
    let cfg = load_config(flags)?;
    let ckpt = load_checkpoint(Path::new(require(flags, "ckpt")?), None)?;
    let out = PathBuf::from(require(flags, "out")?);

    let mode = match flags.get("mode").map(|s| s.as_str()).unwrap_or("t2av") {
        "t2av" => SampleMode::T2av,
        "v2a" => SampleMode::V2aInversion,
        "audio-only" => SampleMode::AudioOnly,
        other => {
            return Err(Error::usage(format!(
                "mode '{other}' must be t2av, v2a, or audio-only"
            )))
        }
    };
    let caption = flags
        .get("caption")
        .cloned()
        .unwrap_or_else(|| "a red ball bouncing fast".to_string());
    let guidance = match flags.get("guidance") {
        Some(s) => s
            .parse::<f32>()
            .map_err(|_| Error::usage(format!("bad guidance '{s}'")))?,
        None => cfg.sample.guidance,
    };
    let steps = match flags.get("steps") {
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| Error::usage(format!("bad steps '{s}'")))?,
        None => cfg.sample.steps,
    };
    let seed = resolve_seed(flags, &cfg)?;

    let pair = sample_with(&ckpt, mode, &caption, guidance, steps, seed, flags, &cfg)?;

    std::fs::create_dir_all(&out)?;
    if mode != SampleMode::AudioOnly {
        let video = ckpt.codec.decode_video(&pair.video)?;
        crate::io::write_frames(&video, &out.join("frames"))?;
    }
    let audio = ckpt.codec.decode_audio(&pair.audio, cfg.data.sample_rate)?;
    crate::io::write_wav(&audio, &out.join("audio.wav"))?;
    crate::io::atomic_write(&out.join("caption.txt"), caption.as_bytes())?;
    println!(
        "sampled mode={} guidance={} steps={} seed={} -> {}",
        flags.get("mode").map(|s| s.as_str()).unwrap_or("t2av"),
        guidance,
        steps,
        seed,
        out.display()
    );
    Ok(())
}

fn resolve_seed(flags: &HashMap<String, String>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flags.get("seed") {
        return s
            .parse::<u64>()
            .map_err(|_| Error::usage(format!("bad seed '{s}'")));
    }
    if let Ok(s) = std::env::var("SYNCFLOW_SEED") {
        return s
            .parse::<u64>()
            .map_err(|_| Error::config(format!("bad SYNCFLOW_SEED '{s}'")));
    }
    Ok(cfg.sample.seed)
}

#[allow(clippy::too_many_arguments)]
fn sample_with(
    ckpt: &Checkpoint,
    mode: SampleMode,
    caption: &str,
    guidance: f32,
    steps: usize,
    seed: u64,
    flags: &HashMap<String, String>,
    cfg: &RunConfig,
) -> Result<crate::rfm::LatentPair> {
    let model = &ckpt.model;
    let tower = &model.cfg;

    // zero-shot resolution: the latent grid follows the requested pixels
    let (grid_h, grid_w) = match flags.get("resolution").map(|s| s.as_str()) {
        Some(res) => parse_resolution(res, &ckpt.codec)?,
        None => match cfg.sample.resolution {
            Some((h, w)) => parse_resolution_raw(h, w, &ckpt.codec)?,
            None => (tower.grid_h, tower.grid_w),
        },
    };

    let video_latent = match flags.get("video") {
        Some(dir) => {
            let sample = load_sample_dir(Path::new(dir))
                .or_else(|_| -> Result<_> {
                    // also accept a bare frames directory
                    let v = crate::io::read_frames(Path::new(dir))?;
                    Ok(crate::io::LoadedSample {
                        video: v,
                        audio: crate::codec::AudioWave::new(vec![0.0; ckpt.codec.cfg.r_a], 8000)?,
                        caption: String::new(),
                        impact_frames: None,
                        impact_times: None,
                    })
                })?;
            let mut rng = SplitMix64::new(seed ^ 0x2AEC);
            Some(ckpt.codec.encode_video(&sample.video, &mut rng)?)
        }
        None => None,
    };

    let req = SampleRequest {
        caption: caption.to_string(),
        guidance,
        steps,
        seed,
        mode,
        video_shape: [tower.t_v, tower.video_channels, grid_h, grid_w],
        audio_shape: [tower.t_a, tower.d_a],
        video_latent,
    };
    let cond = TextCondition::from_caption(&model.text.vocab, caption);
    match mode {
        SampleMode::V2aInversion => v2a_inversion_sample(model, &req, &cond),
        _ => euler_sample(model, &req, &cond),
    }
}

fn parse_resolution(res: &str, codec: &Codec) -> Result<(usize, usize)> {
    let parts: Vec<&str> = res.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::usage(format!("resolution '{res}' must be HxW")));
    }
    let h: usize = parts[0]
        .parse()
        .map_err(|_| Error::usage(format!("bad resolution '{res}'")))?;
    let w: usize = parts[1]
        .parse()
        .map_err(|_| Error::usage(format!("bad resolution '{res}'")))?;
    parse_resolution_raw(h, w, codec)
}

fn parse_resolution_raw(h: usize, w: usize, codec: &Codec) -> Result<(usize, usize)> {
    let rs = codec.cfg.r_s;
    if h == 0 || w == 0 || h % rs != 0 || w % rs != 0 {
        return Err(Error::shape(format!(
            "resolution {h}x{w} must be divisible by the spatial factor {rs}"
        )));
    }
    Ok((h / rs, w / rs))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn eval_cmd(flags: &HashMap<String, String>) -> Result<()> {
    check_flags(flags, &["gen", "ref", "out", "config"])?;
    let cfg = load_config(flags)?;
    let gen_dir = PathBuf::from(require(flags, "gen")?);
    let ref_dir = PathBuf::from(require(flags, "ref")?);
    let out = PathBuf::from(require(flags, "out")?);

    let to_tuples = |samples: Vec<crate::io::LoadedSample>| {
        samples
            .into_iter()
            .map(|s| (s.video, s.audio, s.caption))
            .collect::<Vec<_>>()
    };
    let generated = to_tuples(load_split(&gen_dir)?);
    let reference = to_tuples(load_split(&ref_dir)?);

    let report = crate::eval::evaluate_windowed(
        &generated,
        &reference,
        cfg.eval.feature_seed,
        cfg.eval.hit_window_frames,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(format!("report encode: {e}")))?;
    crate::io::atomic_write(&out, json.as_bytes())?;
    println!("{}", report.summary_line());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn inspect(flags: &HashMap<String, String>) -> Result<()> {
    check_flags(flags, &["ckpt"])?;
    let ckpt = load_checkpoint(Path::new(require(flags, "ckpt")?), None)?;
    println!("tower config:");
    println!(
        "{}",
        serde_json::to_string_pretty(&ckpt.model.cfg).expect("config serializes")
    );
    println!("codec config:");
    println!(
        "{}",
        serde_json::to_string_pretty(&ckpt.codec.cfg).expect("config serializes")
    );
    println!("parameters:");
    let mut total = 0usize;
    for g in ParamGroup::ALL {
        let n = ckpt.model.store.group_param_count(g);
        total += n;
        println!(
            "  {:<13} {:>9} params  hash {:016x}",
            g.name(),
            n,
            ckpt.model.store.group_hash(g)
        );
    }
    println!("  {:<13} {total:>9} params", "total");
    println!("stage history:");
    if ckpt.state.stage_history.is_empty() {
        println!("  (none)");
    }
    for rec in &ckpt.state.stage_history {
        println!("  {} ({} steps)", rec.stage, rec.steps);
    }
    println!(
        "optimizer step {}; rng state {:016x}; step in current stage {}",
        ckpt.state.adam.step,
        ckpt.state.rng.state(),
        ckpt.state.step_in_stage
    );
    Ok(())
}

fn check_flags(flags: &HashMap<String, String>, allowed: &[&str]) -> Result<()> {
    for key in flags.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::usage(format!("unknown flag --{key}")));
        }
    }
    Ok(())
}
