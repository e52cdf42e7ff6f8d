//! Desk-scale evaluation: onset synchronization between the modalities,
//! Fréchet distance over fixed seeded features, and rule-based caption
//! probes. These are structural analogues of perceptual-network metrics,
//! not numerically comparable to them.

use serde::Serialize;

use crate::codec::{AudioWave, VideoTensor};
use crate::error::{Error, Result};
use crate::numerics::SplitMix64;
use crate::synthdata::{BallColor, BallSpeed, FPS};

/// Clip duration used as the penalty for unmatched events.
const CLIP_SECONDS: f64 = 2.0;
/// Default sync hit window: two frames at 8 FPS.
pub const DEFAULT_HIT_WINDOW_FRAMES: f64 = 2.0;

// ---------------------------------------------------------------------------
// onset and impact detection
// ---------------------------------------------------------------------------

/// Short-time-energy onset detector: 20 ms windows at a 10 ms hop, onsets
/// where energy rises through 4x the median window energy, 50 ms refractory.
/// Silence yields no onsets.
pub fn detect_audio_onsets(y: &AudioWave) -> Vec<f64> {
    let sr = y.sample_rate() as usize;
    let hop = sr / 100; // 10 ms
    let win = hop * 2; // 20 ms
    if hop == 0 || y.len() < win {
        return Vec::new();
    }
    let n_windows = (y.len() - win) / hop + 1;
    let mut energy = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let s = &y.samples()[k * hop..k * hop + win];
        energy.push(s.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
    }
    let mut sorted = energy.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let threshold = (4.0 * median).max(1e-12);

    let refractory = 5; // 50 ms in hops
    let mut onsets = Vec::new();
    let mut last: isize = -(refractory as isize) - 1;
    let mut prev_above = false;
    for (k, &e) in energy.iter().enumerate() {
        let above = e > threshold;
        if above && !prev_above && (k as isize - last) > refractory as isize {
            // report the window center: a ramped onset that first crosses in
            // window k started somewhere inside it
            onsets.push((k as f64 * hop as f64 + win as f64 / 2.0) / sr as f64);
            last = k as isize;
        }
        prev_above = above;
    }
    onsets
}

/// Result of tracking the disc through a clip.
#[derive(Debug, Clone, Serialize)]
pub struct ImpactDetection {
    /// Frames where the disc sits at a local maximum of its vertical
    /// position (floor contact).
    pub impact_frames: Vec<usize>,
    /// Frames where no disc was found (flagged, skipped in tracking).
    pub skipped_frames: Vec<usize>,
}

/// Tracks the intensity-weighted centroid of non-background pixels per
/// frame and reports strict local maxima of the vertical position with a
/// two-frame refractory period.
pub fn detect_visual_impacts(v: &VideoTensor) -> ImpactDetection {
    let (f, h, w) = (v.frames(), v.height(), v.width());
    let mut ys: Vec<Option<f64>> = Vec::with_capacity(f);
    let mut skipped = Vec::new();
    for fi in 0..f {
        let mut mass = 0.0f64;
        let mut moment = 0.0f64;
        for yy in 0..h {
            for xx in 0..w {
                let intensity =
                    (v.at(fi, 0, yy, xx) + v.at(fi, 1, yy, xx) + v.at(fi, 2, yy, xx)) as f64;
                if intensity > 0.05 {
                    mass += intensity;
                    moment += intensity * yy as f64;
                }
            }
        }
        if mass > 0.0 {
            ys.push(Some(moment / mass));
        } else {
            ys.push(None);
            skipped.push(fi);
        }
    }

    let mut impacts = Vec::new();
    let mut last: isize = -3;
    for k in 0..f {
        let Some(yk) = ys[k] else { continue };
        let prev = if k > 0 { ys[k - 1] } else { None };
        let next = if k + 1 < f { ys[k + 1] } else { None };
        // strict local maximum of the downward position; plateaus (a disc at
        // rest) never qualify
        let ge_prev = prev.map_or(true, |p| yk >= p);
        let ge_next = next.map_or(true, |n| yk >= n);
        let gt_prev = prev.map_or(false, |p| yk > p + 1e-9);
        let gt_next = next.map_or(false, |n| yk > n + 1e-9);
        if ge_prev && ge_next && (gt_prev || gt_next) && (k as isize - last) >= 2 {
            impacts.push(k);
            last = k as isize;
        }
    }
    ImpactDetection {
        impact_frames: impacts,
        skipped_frames: skipped,
    }
}

// ---------------------------------------------------------------------------
// synchronization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SyncScore {
    /// Mean |dt| in seconds over matched pairs plus a clip-length penalty
    /// per unmatched event.
    pub mean_error: f64,
    /// Fraction of all events matched within the two-frame window.
    pub hit_rate: f64,
    pub n_onsets: usize,
    pub n_impacts: usize,
    pub n_matched: usize,
}

/// Greedy nearest-time matching between detected audio onsets and detected
/// visual impacts, with the default two-frame hit window.
pub fn onset_sync_error(video: &VideoTensor, audio: &AudioWave) -> SyncScore {
    onset_sync_error_windowed(video, audio, DEFAULT_HIT_WINDOW_FRAMES)
}

pub fn onset_sync_error_windowed(
    video: &VideoTensor,
    audio: &AudioWave,
    hit_window_frames: f64,
) -> SyncScore {
    let onsets = detect_audio_onsets(audio);
    let impacts = detect_visual_impacts(video);
    let impact_times: Vec<f64> = impacts
        .impact_frames
        .iter()
        .map(|&k| k as f64 / FPS)
        .collect();
    sync_from_events_windowed(&onsets, &impact_times, hit_window_frames)
}

/// The matching core with the default window, exposed for tests that
/// construct event lists.
pub fn sync_from_events(onsets: &[f64], impacts: &[f64]) -> SyncScore {
    sync_from_events_windowed(onsets, impacts, DEFAULT_HIT_WINDOW_FRAMES)
}

pub fn sync_from_events_windowed(
    onsets: &[f64],
    impacts: &[f64],
    hit_window_frames: f64,
) -> SyncScore {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &o) in onsets.iter().enumerate() {
        for (j, &m) in impacts.iter().enumerate() {
            pairs.push(((o - m).abs(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut used_onset = vec![false; onsets.len()];
    let mut used_impact = vec![false; impacts.len()];
    let mut errors = Vec::new();
    for (d, i, j) in pairs {
        if !used_onset[i] && !used_impact[j] {
            used_onset[i] = true;
            used_impact[j] = true;
            errors.push(d);
        }
    }
    let matched = errors.len();
    let unmatched = (onsets.len() - matched) + (impacts.len() - matched);
    let total_events = matched + unmatched;
    if total_events == 0 {
        return SyncScore {
            mean_error: 0.0,
            hit_rate: 1.0,
            n_onsets: 0,
            n_impacts: 0,
            n_matched: 0,
        };
    }
    let window = hit_window_frames / FPS;
    let sum: f64 = errors.iter().sum::<f64>() + unmatched as f64 * CLIP_SECONDS;
    let hits = errors.iter().filter(|&&d| d <= window).count();
    SyncScore {
        mean_error: sum / total_events as f64,
        hit_rate: hits as f64 / total_events as f64,
        n_onsets: onsets.len(),
        n_impacts: impacts.len(),
        n_matched: matched,
    }
}

// ---------------------------------------------------------------------------
// Fréchet distance over fixed features
// ---------------------------------------------------------------------------

/// Fréchet distance between two sample sets of d-vectors:
/// `|mu_A - mu_B|^2 + Tr(S_A + S_B - 2 (S_A S_B)^(1/2))`, with the matrix
/// square root computed through a symmetric eigendecomposition of
/// `S_A^(1/2) S_B S_A^(1/2)`. Returns the distance and whether a
/// rank-deficiency regularizer was applied.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::config(
            "frechet_distance needs at least 2 samples per set".to_string(),
        ));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::config("feature dimensions differ".to_string()));
    }
    let (mu_a, mut cov_a) = mean_cov(a, d);
    let (mu_b, mut cov_b) = mean_cov(b, d);

    let mut regularized = false;
    for cov in [&mut cov_a, &mut cov_b] {
        let eigs = jacobi_eigenvalues(cov, d);
        if eigs.iter().any(|&l| l < 1e-10) {
            for i in 0..d {
                cov[i * d + i] += 1e-6;
            }
            regularized = true;
        }
    }

    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();

    let sqrt_a = sqrtm(&cov_a, d);
    // M = S_A^(1/2) S_B S_A^(1/2)
    let tmp = matmul_sq(&sqrt_a, &cov_b, d);
    let m = matmul_sq(&tmp, &sqrt_a, d);
    // symmetrize against rounding before the eigensolve
    let mut msym = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            msym[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    let eigs = jacobi_eigenvalues(&msym, d);
    let tr_sqrt: f64 = eigs.iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok(((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0), regularized))
}

fn mean_cov(samples: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mut mu = vec![0.0f64; d];
    for s in samples {
        for (m, &x) in mu.iter_mut().zip(s) {
            *m += x;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mu[j]);
            }
        }
    }
    // unbiased estimator
    let denom = (n - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }
    (mu, cov)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += av * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrtm(sym: &[f64], d: usize) -> Vec<f64> {
    let (eigs, q) = jacobi_eigen(sym, d);
    // Q sqrt(L) Q^T
    let mut out = vec![0.0f64; d * d];
    for k in 0..d {
        let s = eigs[k].max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += s * q[i * d + k] * q[j * d + k];
            }
        }
    }
    out
}

fn jacobi_eigenvalues(sym: &[f64], d: usize) -> Vec<f64> {
    jacobi_eigen(sym, d).0
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(sym: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    let mut q = vec![0.0f64; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apr = a[p * d + r];
                if apr.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let arr = a[r * d + r];
                let theta = 0.5 * (arr - app) / apr;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akr = a[k * d + r];
                    a[k * d + p] = c * akp - s * akr;
                    a[k * d + r] = s * akp + c * akr;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let ark = a[r * d + k];
                    a[p * d + k] = c * apk - s * ark;
                    a[r * d + k] = s * apk + c * ark;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkr = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkr;
                    q[k * d + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let eigs: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigs, q)
}

// ---------------------------------------------------------------------------
// fixed features
// ---------------------------------------------------------------------------

pub const FEATURE_DIM: usize = 16;

/// Seeded Gaussian projection matrix `[d_in, FEATURE_DIM]`.
fn projection(d_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::derive(seed, 0xFEA7);
    let scale = 1.0 / (d_in as f64).sqrt();
    (0..d_in * FEATURE_DIM)
        .map(|_| rng.normal() as f64 * scale)
        .collect()
}

fn project(base: &[f64], seed: u64) -> Vec<f64> {
    let p = projection(base.len(), seed);
    let mut out = vec![0.0f64; FEATURE_DIM];
    for (i, &x) in base.iter().enumerate() {
        for j in 0..FEATURE_DIM {
            out[j] += x * p[i * FEATURE_DIM + j];
        }
    }
    out
}

/// Video features: per-frame mean color plus a motion-energy histogram over
/// frame transitions, then a seeded random projection to 16 dims.
pub fn video_features(v: &VideoTensor, seed: u64) -> Vec<f64> {
    let (f, h, w) = (v.frames(), v.height(), v.width());
    let per = (h * w) as f64;
    let mut base = Vec::with_capacity(f * 3 + 16);
    for fi in 0..f {
        for c in 0..3 {
            let mut acc = 0.0f64;
            for yy in 0..h {
                for xx in 0..w {
                    acc += v.at(fi, c, yy, xx) as f64;
                }
            }
            base.push(acc / per);
        }
    }
    // motion energy between consecutive frames, padded to 16 bins
    let mut motion = vec![0.0f64; 16];
    for fi in 0..f.saturating_sub(1) {
        let mut acc = 0.0f64;
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let d = (v.at(fi + 1, c, yy, xx) - v.at(fi, c, yy, xx)) as f64;
                    acc += d * d;
                }
            }
        }
        motion[fi.min(15)] += acc / per;
    }
    base.extend_from_slice(&motion);
    project(&base, seed)
}

/// Audio features: log band energies on a Goertzel bank (24 log-spaced
/// bands), then a seeded random projection to 16 dims.
pub fn audio_features(a: &AudioWave, seed: u64) -> Vec<f64> {
    let bands = goertzel_bands();
    let sr = a.sample_rate() as f64;
    let win = 256usize;
    let hop = 128usize;
    let mut base = vec![0.0f64; bands.len()];
    let mut n_windows = 0.0f64;
    let samples = a.samples();
    let mut start = 0usize;
    while start + win <= samples.len() {
        for (bi, &freq) in bands.iter().enumerate() {
            base[bi] += goertzel_power(&samples[start..start + win], sr, freq);
        }
        n_windows += 1.0;
        start += hop;
    }
    if n_windows > 0.0 {
        for b in base.iter_mut() {
            *b = (*b / n_windows).ln_1p();
        }
    }
    project(&base, seed.wrapping_add(1))
}

fn goertzel_bands() -> Vec<f64> {
    // 24 log-spaced centers between 100 Hz and 3600 Hz
    (0..24)
        .map(|i| 100.0 * (3600.0f64 / 100.0).powf(i as f64 / 23.0))
        .collect()
}

/// Power of one frequency bin over a window (Goertzel recurrence).
pub fn goertzel_power(x: &[f32], sr: f64, freq: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI * freq / sr;
    let coeff = 2.0 * k.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &v in x {
        let s0 = v as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    (s1 * s1 + s2 * s2 - coeff * s1 * s2) / x.len() as f64
}

// ---------------------------------------------------------------------------
// caption probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CaptionMatch {
    pub color_hit: bool,
    pub speed_hit: bool,
    /// Set when the video had no foreground pixels to classify.
    pub no_color: bool,
}

/// Checks a generated pair against its caption: the dominant chroma and the
/// audio tone peak must both agree with the caption color, and the impact
/// count must land in the caption's speed class.
pub fn caption_match(video: &VideoTensor, audio: &AudioWave, caption: &str) -> CaptionMatch {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let want_color = words.iter().find_map(|w| BallColor::from_word(w));
    let want_speed = words.iter().find_map(|w| BallSpeed::from_word(w));

    // dominant chroma over foreground pixels
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let mut sums = [0.0f64; 3];
    let mut mass = 0.0f64;
    for fi in 0..f {
        for yy in 0..h {
            for xx in 0..w {
                let px = [
                    video.at(fi, 0, yy, xx) as f64,
                    video.at(fi, 1, yy, xx) as f64,
                    video.at(fi, 2, yy, xx) as f64,
                ];
                if px[0] + px[1] + px[2] > 0.15 {
                    for c in 0..3 {
                        sums[c] += px[c];
                    }
                    mass += 1.0;
                }
            }
        }
    }
    let no_color = mass == 0.0;
    let video_color = if no_color {
        None
    } else {
        let idx = (0..3)
            .max_by(|&i, &j| sums[i].partial_cmp(&sums[j]).unwrap())
            .unwrap();
        Some([BallColor::Red, BallColor::Green, BallColor::Blue][idx])
    };

    // audio tone: power at the three template frequencies
    let sr = audio.sample_rate() as f64;
    let powers: Vec<f64> = BallColor::ALL
        .iter()
        .map(|c| goertzel_power(audio.samples(), sr, c.tone_hz()))
        .collect();
    let audio_color = (0..3)
        .max_by(|&i, &j| powers[i].partial_cmp(&powers[j]).unwrap())
        .map(|i| BallColor::ALL[i]);

    let impacts = detect_visual_impacts(video);
    let detected_speed = if impacts.impact_frames.len() >= 2 {
        BallSpeed::Fast
    } else {
        BallSpeed::Slow
    };

    let color_hit = match (want_color, video_color, audio_color) {
        (Some(want), Some(vc), Some(ac)) => vc == want && ac == want,
        _ => false,
    };
    let speed_hit = match want_speed {
        Some(want) => detected_speed == want && !no_color,
        None => false,
    };
    CaptionMatch {
        color_hit,
        speed_hit,
        no_color,
    }
}

// ---------------------------------------------------------------------------
// report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SampleEval {
    pub index: usize,
    pub sync: SyncScore,
    pub caption: CaptionMatch,
    pub skipped_frames: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub onset_sync_error_mean: f64,
    pub onset_sync_hit_rate: f64,
    pub frechet_video: f64,
    pub frechet_audio: f64,
    pub caption_color_acc: f64,
    pub caption_speed_acc: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub covariance_regularized: bool,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "sync_err={:.4}s hit_rate={:.3} frechet_v={:.4} frechet_a={:.4} color_acc={:.3} speed_acc={:.3} (n={})",
            self.onset_sync_error_mean,
            self.onset_sync_hit_rate,
            self.frechet_video,
            self.frechet_audio,
            self.caption_color_acc,
            self.caption_speed_acc,
            self.n_generated
        )
    }
}

/// Evaluate generated pairs against a reference set. `feature_seed` fixes
/// the random projections.
pub fn evaluate(
    generated: &[(VideoTensor, AudioWave, String)],
    reference: &[(VideoTensor, AudioWave, String)],
    feature_seed: u64,
) -> Result<EvalReport> {
    evaluate_windowed(generated, reference, feature_seed, DEFAULT_HIT_WINDOW_FRAMES)
}

pub fn evaluate_windowed(
    generated: &[(VideoTensor, AudioWave, String)],
    reference: &[(VideoTensor, AudioWave, String)],
    feature_seed: u64,
    hit_window_frames: f64,
) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::config("no generated samples to evaluate".to_string()));
    }
    let mut per_sample = Vec::with_capacity(generated.len());
    let mut sync_sum = 0.0f64;
    let mut hit_sum = 0.0f64;
    let mut color_hits = 0usize;
    let mut speed_hits = 0usize;
    for (i, (v, a, caption)) in generated.iter().enumerate() {
        let sync = onset_sync_error_windowed(v, a, hit_window_frames);
        let cap = caption_match(v, a, caption);
        sync_sum += sync.mean_error;
        hit_sum += sync.hit_rate;
        if cap.color_hit {
            color_hits += 1;
        }
        if cap.speed_hit {
            speed_hits += 1;
        }
        let skipped = detect_visual_impacts(v).skipped_frames.len();
        per_sample.push(SampleEval {
            index: i,
            sync,
            caption: cap,
            skipped_frames: skipped,
        });
    }

    let (frechet_video, frechet_audio, regularized) =
        if reference.len() >= 2 && generated.len() >= 2 {
            let gv: Vec<Vec<f64>> = generated
                .iter()
                .map(|(v, _, _)| video_features(v, feature_seed))
                .collect();
            let rv: Vec<Vec<f64>> = reference
                .iter()
                .map(|(v, _, _)| video_features(v, feature_seed))
                .collect();
            let ga: Vec<Vec<f64>> = generated
                .iter()
                .map(|(_, a, _)| audio_features(a, feature_seed))
                .collect();
            let ra: Vec<Vec<f64>> = reference
                .iter()
                .map(|(_, a, _)| audio_features(a, feature_seed))
                .collect();
            let (fv, r1) = frechet_distance(&gv, &rv)?;
            let (fa, r2) = frechet_distance(&ga, &ra)?;
            (fv, fa, r1 || r2)
        } else {
            (f64::NAN, f64::NAN, false)
        };

    let n = generated.len() as f64;
    Ok(EvalReport {
        onset_sync_error_mean: sync_sum / n,
        onset_sync_hit_rate: hit_sum / n,
        frechet_video,
        frechet_audio,
        caption_color_acc: color_hits as f64 / n,
        caption_speed_acc: speed_hits as f64 / n,
        n_generated: generated.len(),
        n_reference: reference.len(),
        covariance_regularized: regularized,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{det_sin, generate_sample, SceneParams, SAMPLE_RATE, SAMPLES};

    fn burst_at(times: &[f64], freq: f64) -> AudioWave {
        let mut audio = vec![0.0f64; SAMPLES];
        let burst = (0.1 * SAMPLE_RATE as f64) as usize;
        for &t in times {
            let n0 = (t * SAMPLE_RATE as f64).round() as usize;
            for j in 0..burst {
                if n0 + j >= SAMPLES {
                    break;
                }
                let win =
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / burst as f64).cos());
                audio[n0 + j] += 0.5
                    * win
                    * det_sin(2.0 * std::f64::consts::PI * freq * j as f64 / SAMPLE_RATE as f64);
            }
        }
        AudioWave::new(audio.iter().map(|&v| v as f32).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn silence_has_no_onsets() {
        let y = AudioWave::new(vec![0.0; SAMPLES], SAMPLE_RATE).unwrap();
        assert!(detect_audio_onsets(&y).is_empty());
    }

    #[test]
    fn single_burst_detected_within_10ms() {
        let y = burst_at(&[0.5], 440.0);
        let onsets = detect_audio_onsets(&y);
        assert_eq!(onsets.len(), 1, "onsets {onsets:?}");
        assert!((onsets[0] - 0.5).abs() <= 0.010, "onset at {}", onsets[0]);
    }

    #[test]
    fn two_bursts_300ms_apart() {
        let y = burst_at(&[0.4, 0.7], 330.0);
        let onsets = detect_audio_onsets(&y);
        assert_eq!(onsets.len(), 2, "onsets {onsets:?}");
    }

    #[test]
    fn detected_impacts_match_ground_truth_within_one_frame() {
        for i in 0..24 {
            let p = SceneParams::draw(500, i);
            let pair = generate_sample(&p).unwrap();
            let det = detect_visual_impacts(&pair.video);
            assert_eq!(
                det.impact_frames.len(),
                pair.impact_frames.len(),
                "sample {i}: detected {:?} vs truth {:?}",
                det.impact_frames,
                pair.impact_frames
            );
            for (d, t) in det.impact_frames.iter().zip(&pair.impact_frames) {
                assert!(
                    (*d as isize - *t as isize).abs() <= 1,
                    "sample {i}: {d} vs {t}"
                );
            }
        }
    }

    #[test]
    fn static_scene_has_no_impacts() {
        // a disc resting on the floor for the whole clip
        let p = SceneParams {
            color: BallColor::Green,
            speed: BallSpeed::Slow,
            initial_height: 0.0,
            restitution: 0.0,
            seed: 1,
        };
        let pair = generate_sample(&p).unwrap();
        let det = detect_visual_impacts(&pair.video);
        assert!(det.impact_frames.is_empty(), "{:?}", det.impact_frames);
    }

    #[test]
    fn slow_scene_has_exactly_one_detected_impact() {
        for i in [0u64, 3, 9] {
            let p = SceneParams {
                color: BallColor::Red,
                speed: BallSpeed::Slow,
                initial_height: 0.7 + 0.01 * i as f64,
                restitution: 0.65,
                seed: i,
            };
            let pair = generate_sample(&p).unwrap();
            let det = detect_visual_impacts(&pair.video);
            assert_eq!(det.impact_frames.len(), 1, "{:?}", det.impact_frames);
        }
    }

    #[test]
    fn sync_on_ground_truth_is_tight() {
        let mut hit_acc = 0.0;
        let n = 24;
        for i in 0..n {
            let p = SceneParams::draw(900, i);
            let pair = generate_sample(&p).unwrap();
            let score = onset_sync_error(&pair.video, &pair.audio);
            hit_acc += score.hit_rate;
        }
        let rate = hit_acc / n as f64;
        assert!(rate >= 0.95, "ground-truth hit rate {rate}");
    }

    #[test]
    fn shifted_audio_shifts_mean_error() {
        // move every onset +0.5 s; with all events matched the mean error
        // equals the shift
        let impacts = vec![0.4, 0.9, 1.4];
        let onsets: Vec<f64> = impacts.iter().map(|t| t + 0.5).collect();
        let score = sync_from_events(&onsets, &impacts);
        assert_eq!(score.n_matched, 3);
        assert!((score.mean_error - 0.5).abs() < 1e-9);
    }

    #[test]
    fn silent_audio_penalizes_every_impact() {
        let impacts = vec![0.4, 0.9, 1.4];
        let score = sync_from_events(&[], &impacts);
        assert_eq!(score.n_matched, 0);
        assert!((score.mean_error - 2.0).abs() < 1e-9);
        assert_eq!(score.hit_rate, 0.0);
    }

    fn gaussian_set(n: usize, mean: f64, std: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| vec![mean + std * rng.normal() as f64])
            .collect()
    }

    #[test]
    fn frechet_zero_on_identical_sets() {
        let a = gaussian_set(200, 0.0, 1.0, 5);
        let (d, _) = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "distance {d}");
    }

    #[test]
    fn frechet_symmetric() {
        let a = gaussian_set(300, 0.0, 1.0, 6);
        let b = gaussian_set(300, 0.7, 1.3, 7);
        let (ab, _) = frechet_distance(&a, &b).unwrap();
        let (ba, _) = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
    }

    #[test]
    fn frechet_matches_1d_closed_form() {
        // N(0,1) vs N(1,1): (mu diff)^2 + (sigma_a - sigma_b)^2 = 1.
        // Averaged over a few independent draws at n = 10^4 to keep the
        // Monte-Carlo fluctuation of the squared mean difference small.
        let mut acc = 0.0;
        let reps = 5;
        for r in 0..reps {
            let a = gaussian_set(10_000, 0.0, 1.0, 800 + r);
            let b = gaussian_set(10_000, 1.0, 1.0, 900 + r);
            let (d, _) = frechet_distance(&a, &b).unwrap();
            acc += d;
        }
        let d = acc / reps as f64;
        assert!((d - 1.0).abs() < 0.05, "distance {d}");
    }

    #[test]
    fn frechet_invariant_under_orthogonal_transforms() {
        let mut rng = SplitMix64::new(10);
        let d = 3usize;
        let a: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rng.normal() as f64).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| 0.5 + 1.2 * rng.normal() as f64).collect())
            .collect();
        // Givens rotations in planes (0,1) then (1,2)
        let rotate = |v: &Vec<f64>| -> Vec<f64> {
            let (c1, s1) = (0.8f64, 0.6f64);
            let (c2, s2) = (0.6f64, -0.8f64);
            let mut r = v.clone();
            let (x, y) = (r[0], r[1]);
            r[0] = c1 * x - s1 * y;
            r[1] = s1 * x + c1 * y;
            let (y, z) = (r[1], r[2]);
            r[1] = c2 * y - s2 * z;
            r[2] = s2 * y + c2 * z;
            r
        };
        let (base, _) = frechet_distance(&a, &b).unwrap();
        let ar: Vec<Vec<f64>> = a.iter().map(rotate).collect();
        let br: Vec<Vec<f64>> = b.iter().map(rotate).collect();
        let (rot, _) = frechet_distance(&ar, &br).unwrap();
        assert!((base - rot).abs() < 1e-6, "{base} vs {rot}");
    }

    #[test]
    fn rank_deficient_covariance_is_regularized_and_flagged() {
        // constant second dim -> singular covariance
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 1.0]).collect();
        let b: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.9, 1.0]).collect();
        let (d, flagged) = frechet_distance(&a, &b).unwrap();
        assert!(flagged);
        assert!(d.is_finite());
    }

    #[test]
    fn caption_match_on_ground_truth() {
        let mut color_hits = 0usize;
        let mut speed_hits = 0usize;
        let n = 24;
        for i in 0..n {
            let p = SceneParams::draw(321, i);
            let pair = generate_sample(&p).unwrap();
            let m = caption_match(&pair.video, &pair.audio, &pair.caption);
            color_hits += m.color_hit as usize;
            speed_hits += m.speed_hit as usize;
        }
        assert!(color_hits as f64 / n as f64 >= 0.95, "{color_hits}/{n}");
        assert!(speed_hits as f64 / n as f64 >= 0.95, "{speed_hits}/{n}");
    }

    #[test]
    fn mismatched_caption_misses() {
        let p = SceneParams {
            color: BallColor::Red,
            speed: BallSpeed::Fast,
            initial_height: 0.8,
            restitution: 0.65,
            seed: 3,
        };
        let pair = generate_sample(&p).unwrap();
        let m = caption_match(&pair.video, &pair.audio, "a blue ball bouncing slow");
        assert!(!m.color_hit);
        assert!(!m.speed_hit);
    }

    #[test]
    fn all_black_video_flags_no_color() {
        let video = VideoTensor::new(16, 32, 32, vec![0.0; 16 * 3 * 32 * 32]).unwrap();
        let audio = burst_at(&[0.5], 330.0);
        let m = caption_match(&video, &audio, "a red ball bouncing slow");
        assert!(m.no_color);
        assert!(!m.color_hit);
        assert!(!m.speed_hit);
    }

    #[test]
    fn evaluate_ground_truth_against_itself() {
        let mut gen = Vec::new();
        for i in 0..8 {
            let p = SceneParams::draw(77, i);
            let pair = generate_sample(&p).unwrap();
            gen.push((pair.video, pair.audio, pair.caption));
        }
        let report = evaluate(&gen, &gen, 1234).unwrap();
        assert!(report.frechet_video.abs() < 1e-6);
        assert!(report.frechet_audio.abs() < 1e-6);
        assert!(report.onset_sync_hit_rate >= 0.95);
        assert!(report.caption_color_acc >= 0.95);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("onset_sync_error_mean"));
    }
}
