//! Synthetic paired audio-video data with ground-truth synchronization.
//!
//! Each sample is a two-second clip of a colored disc falling under gravity
//! and bouncing on the floor. Every floor impact adds a Hann-windowed tone
//! burst to the audio at that exact time; the tone frequency is a fixed
//! bijection of the disc color. Motion is closed-form ballistics, rendering
//! and synthesis use only IEEE-exact arithmetic plus a polynomial sine, and
//! each sample is seeded independently, so generation is reproducible
//! across platforms sample by sample.

use crate::codec::{AudioWave, VideoTensor};
use crate::error::Result;
use crate::numerics::SplitMix64;

pub const FRAMES: usize = 16;
pub const FPS: f64 = 8.0;
pub const WIDTH: usize = 32;
pub const HEIGHT: usize = 32;
pub const SAMPLE_RATE: u32 = 8000;
pub const SAMPLES: usize = 16000;
pub const CLIP_SECONDS: f64 = 2.0;
/// Tone burst length in seconds.
pub const BURST_SECONDS: f64 = 0.100;
const BURST_AMP: f64 = 0.45;
/// Bounces below this apex height are treated as the ball coming to rest.
/// With the parameter ranges in [`SceneParams::draw`], fast scenes stop at
/// exactly three impacts, all separated by more than 0.4 s, so every impact
/// is resolvable at 8 FPS and tone bursts never overlap.
const REST_HEIGHT: f64 = 0.18;

const FLOOR_ROW: f64 = 27.5;
const TOP_ROW: f64 = 4.5;
const BALL_RADIUS: f64 = 3.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallColor {
    Red,
    Green,
    Blue,
}

impl BallColor {
    pub const ALL: [BallColor; 3] = [BallColor::Red, BallColor::Green, BallColor::Blue];

    /// The fixed color-to-frequency bijection.
    pub fn tone_hz(self) -> f64 {
        match self {
            BallColor::Red => 330.0,
            BallColor::Green => 440.0,
            BallColor::Blue => 550.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            BallColor::Red => "red",
            BallColor::Green => "green",
            BallColor::Blue => "blue",
        }
    }

    pub fn from_word(w: &str) -> Option<BallColor> {
        match w {
            "red" => Some(BallColor::Red),
            "green" => Some(BallColor::Green),
            "blue" => Some(BallColor::Blue),
            _ => None,
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            BallColor::Red => [0.92, 0.08, 0.08],
            BallColor::Green => [0.08, 0.92, 0.08],
            BallColor::Blue => [0.08, 0.08, 0.92],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallSpeed {
    Slow,
    Fast,
}

impl BallSpeed {
    pub const ALL: [BallSpeed; 2] = [BallSpeed::Slow, BallSpeed::Fast];

    /// Gravity in screen-heights per second squared. Slow scenes land
    /// exactly once per clip; fast scenes exactly three times.
    pub fn gravity(self) -> f64 {
        match self {
            BallSpeed::Slow => 0.8,
            BallSpeed::Fast => 8.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            BallSpeed::Slow => "slow",
            BallSpeed::Fast => "fast",
        }
    }

    pub fn from_word(w: &str) -> Option<BallSpeed> {
        match w {
            "slow" | "slowly" => Some(BallSpeed::Slow),
            "fast" | "quickly" => Some(BallSpeed::Fast),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub color: BallColor,
    pub speed: BallSpeed,
    /// Initial drop height as a fraction of the play area, in [0, 1).
    pub initial_height: f64,
    /// Coefficient of restitution in [0, 1).
    pub restitution: f64,
    pub seed: u64,
}

impl SceneParams {
    /// Deterministic parameter draw for sample `index` of a split. The
    /// (color, speed) combination cycles so any split of >= 6 samples covers
    /// all six.
    pub fn draw(master_seed: u64, index: u64) -> SceneParams {
        let seed = master_seed.wrapping_add(index);
        let mut rng = SplitMix64::derive(seed, 0xDA7A);
        let combo = (index % 6) as usize;
        SceneParams {
            color: BallColor::ALL[combo % 3],
            speed: BallSpeed::ALL[combo / 3],
            initial_height: rng.uniform(0.7, 0.9) as f64,
            restitution: rng.uniform(0.72, 0.76) as f64,
            seed,
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} ball bouncing {}",
            self.color.word(),
            self.speed.word()
        )
    }
}

/// One paired sample with its synchronization ground truth.
#[derive(Debug, Clone)]
pub struct MediaPair {
    pub video: VideoTensor,
    pub audio: AudioWave,
    pub caption: String,
    /// Frame indices containing a floor impact.
    pub impact_frames: Vec<usize>,
    /// Exact impact times in seconds.
    pub impact_times: Vec<f64>,
}

/// Closed-form impact times of a ball dropped from `h0` under gravity `g`
/// with restitution `e`, truncated to the clip and to bounces that still
/// clear the rest height.
pub fn impact_times(h0: f64, g: f64, e: f64) -> Vec<f64> {
    let mut times = Vec::new();
    if h0 <= 0.0 {
        times.push(0.0);
        return times;
    }
    let t1 = (2.0 * h0 / g).sqrt();
    if t1 >= CLIP_SECONDS {
        return times;
    }
    times.push(t1);
    let mut v = e * (2.0 * g * h0).sqrt();
    let mut t = t1;
    loop {
        // apex height of the next arc
        if v * v / (2.0 * g) < REST_HEIGHT || times.len() >= 32 {
            break;
        }
        t += 2.0 * v / g;
        if t >= CLIP_SECONDS {
            break;
        }
        times.push(t);
        v *= e;
    }
    times
}

/// Ball height (fraction of play area) at time `t`.
fn height_at(t: f64, h0: f64, g: f64, e: f64) -> f64 {
    if h0 <= 0.0 {
        return 0.0;
    }
    let t1 = (2.0 * h0 / g).sqrt();
    if t < t1 {
        return h0 - 0.5 * g * t * t;
    }
    let mut t_k = t1;
    let mut v = e * (2.0 * g * h0).sqrt();
    loop {
        if v * v / (2.0 * g) < REST_HEIGHT {
            return 0.0;
        }
        let flight = 2.0 * v / g;
        if t < t_k + flight {
            let tau = t - t_k;
            return (v * tau - 0.5 * g * tau * tau).max(0.0);
        }
        t_k += flight;
        v *= e;
    }
}

/// Renders the full pair for one parameter set. Bit-identical for identical
/// params.
pub fn generate_sample(params: &SceneParams) -> Result<MediaPair> {
    let g = params.speed.gravity();
    let (h0, e) = (params.initial_height, params.restitution);
    let times = impact_times(h0, g, e);

    // video
    let rgb = params.color.rgb();
    let mut video = vec![0.0f32; FRAMES * 3 * HEIGHT * WIDTH];
    for f in 0..FRAMES {
        let t = f as f64 / FPS;
        let h = height_at(t, h0, g, e);
        let cy = FLOOR_ROW - h * (FLOOR_ROW - TOP_ROW);
        let cx = WIDTH as f64 / 2.0 - 0.5;
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let dist = (dx * dx + dy * dy).sqrt();
                // soft-edged disc: full inside, linear falloff over one pixel
                let alpha = (BALL_RADIUS + 0.5 - dist).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    for c in 0..3 {
                        video[((f * 3 + c) * HEIGHT + y) * WIDTH + x] = rgb[c] * alpha;
                    }
                }
            }
        }
    }

    // audio: one Hann-windowed burst per impact
    let mut audio = vec![0.0f64; SAMPLES];
    let burst_len = (BURST_SECONDS * SAMPLE_RATE as f64) as usize;
    let freq = params.color.tone_hz();
    for &ti in &times {
        let n0 = (ti * SAMPLE_RATE as f64).round() as usize;
        for j in 0..burst_len {
            let n = n0 + j;
            if n >= SAMPLES {
                break;
            }
            let win = 0.5 * (1.0 - det_cos(2.0 * PI64 * j as f64 / burst_len as f64));
            let phase = 2.0 * PI64 * freq * (j as f64 / SAMPLE_RATE as f64);
            audio[n] += BURST_AMP * win * det_sin(phase);
        }
    }
    let audio: Vec<f32> = audio.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();

    let impact_frames: Vec<usize> = times
        .iter()
        .map(|&t| ((t * FPS) as usize).min(FRAMES - 1))
        .collect();

    Ok(MediaPair {
        video: VideoTensor::new(FRAMES, HEIGHT, WIDTH, video)?,
        audio: AudioWave::new(audio, SAMPLE_RATE)?,
        caption: params.caption(),
        impact_frames,
        impact_times: times,
    })
}

/// A generated split with its parameters kept alongside.
#[derive(Debug, Clone)]
pub struct Split {
    pub params: Vec<SceneParams>,
    pub pairs: Vec<MediaPair>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Three disjoint splits: sample i of each split draws from
/// `master_seed + split_offset + i`, so parameter streams never overlap.
pub fn make_splits(n_train: usize, n_val: usize, n_test: usize, master_seed: u64) -> Result<Dataset> {
    let gen = |offset: u64, n: usize| -> Result<Split> {
        let mut params = Vec::with_capacity(n);
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let p = SceneParams::draw(master_seed.wrapping_add(offset), i as u64);
            pairs.push(generate_sample(&p)?);
            params.push(p);
        }
        Ok(Split { params, pairs })
    };
    Ok(Dataset {
        train: gen(0, n_train)?,
        val: gen(n_train as u64, n_val)?,
        test: gen((n_train + n_val) as u64, n_test)?,
    })
}

const PI64: f64 = std::f64::consts::PI;

/// Platform-deterministic sine: argument reduction plus a Taylor polynomial,
/// using only IEEE-exact operations.
pub fn det_sin(x: f64) -> f64 {
    // reduce to [-pi, pi]
    let tau = 2.0 * PI64;
    let mut r = x - (x / tau).floor() * tau; // [0, tau)
    if r > PI64 {
        r -= tau;
    }
    // fold into [-pi/2, pi/2]
    if r > PI64 / 2.0 {
        r = PI64 - r;
    } else if r < -PI64 / 2.0 {
        r = -PI64 - r;
    }
    let x2 = r * r;
    // sin(r) = r * (1 - x2/3! + x2^2/5! - ...)
    let mut acc = 1.0f64;
    let coeffs = [
        -1.0 / 6.0,
        1.0 / 120.0,
        -1.0 / 5040.0,
        1.0 / 362880.0,
        -1.0 / 39916800.0,
        1.0 / 6227020800.0,
        -1.0 / 1307674368000.0,
    ];
    let mut p = 1.0f64;
    for &c in &coeffs {
        p *= x2;
        acc += c * p;
    }
    r * acc
}

pub fn det_cos(x: f64) -> f64 {
    det_sin(PI64 / 2.0 - x)
}
