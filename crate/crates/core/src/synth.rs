//! Synthetic speakers: an impulse-train voice source shaped by three formant
//! resonators, with slow amplitude modulation, background noise and silence
//! gaps whose positions are written out as per-frame labels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{quantize_pcm16, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::episodes::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};

/// Samples per label frame (10 ms at 16 kHz).
pub const LABEL_HOP: usize = 160;
const FORMANT_RANGE: (f64, f64) = (300.0, 3500.0);
const PITCH_RANGE: (f64, f64) = (80.0, 300.0);
const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpeaker {
    pub formants: [f64; 3],
    pub pitch: f64,
    pub seed: u64,
}

impl SynthSpeaker {
    /// Formants are spread over the range by sorting three uniform draws and
    /// forcing a minimum spacing of 150 Hz.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = FORMANT_RANGE;
        loop {
            let mut f: [f64; 3] = std::array::from_fn(|_| rng.gen_range(lo..hi));
            f.sort_by(f64::total_cmp);
            if f[1] - f[0] >= 150.0 && f[2] - f[1] >= 150.0 {
                let pitch = PITCH_RANGE.0 * (PITCH_RANGE.1 / PITCH_RANGE.0).powf(rng.gen::<f64>());
                return SynthSpeaker { formants: f, pitch, seed };
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_seconds: f64,
    pub silence_fraction: f64,
    pub snr_db: f64,
    /// Per-utterance relative spread of pitch and formants.
    pub variability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 20,
            utts_per_speaker: 10,
            utt_seconds: 4.0,
            silence_fraction: 0.3,
            snr_db: 20.0,
            variability: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::Config("speakers and utterances must be positive".into()));
        }
        if !(self.utt_seconds > 0.0) {
            return Err(Error::Config("utt_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return Err(Error::Config("silence_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// splitmix64 finaliser, used to derive independent seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix_seed(base), |acc, &p| mix_seed(acc ^ mix_seed(p)))
}

pub struct Utterance {
    pub wave: Waveform,
    /// One entry per 10 ms, true for speech.
    pub speech: Vec<bool>,
}

/// Two-pole resonator in the Klatt form with unit gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, rate: f64) -> Self {
        let t = 1.0 / rate;
        let c = -(-2.0 * PI * bw * t).exp();
        let b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * freq * t).cos();
        Resonator { a: 1.0 - b - c, b, c, y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Splits `total` into `parts` nonnegative integers uniformly at random.
fn composition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain([total]) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Speech/silence layout over label frames: 2 to 4 gaps whose lengths add
/// up to the silence fraction.
fn silence_layout(frames: usize, fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let silent = (fraction * frames as f64).round() as usize;
    if silent == 0 {
        return vec![true; frames];
    }
    let gaps = rng.gen_range(2..=4usize).min(silent);
    let gap_len: Vec<usize> = composition(silent - gaps, gaps, rng).iter().map(|g| g + 1).collect();
    let runs = composition(frames - silent, gaps + 1, rng);
    let mut out = Vec::with_capacity(frames);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat(true).take(r));
        if let Some(&g) = gap_len.get(i) {
            out.extend(std::iter::repeat(false).take(g));
        }
    }
    out
}

pub fn synthesize(spk: &SynthSpeaker, cfg: &SynthConfig, seed: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = DEFAULT_SAMPLE_RATE as f64;
    let frames = ((cfg.utt_seconds * rate) as usize).div_ceil(LABEL_HOP);
    let n = frames * LABEL_HOP;
    let jitter = Normal::new(0.0, cfg.variability.max(0.0)).expect("finite std");
    let f0 = spk.pitch * (1.0 + jitter.sample(&mut rng));
    let mut res: Vec<Resonator> = spk
        .formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&f, bw)| Resonator::new(f * (1.0 + jitter.sample(&mut rng)), bw, rate))
        .collect();

    // Intonation: slow sinusoidal pitch drift of a few percent.
    let drift_rate = rng.gen_range(0.3..1.0);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let am_rate = rng.gen_range(2.0..6.0);
    let am_phase = rng.gen_range(0.0..2.0 * PI);

    let mut voiced = vec![0.0; n];
    let mut phase = 0.0;
    let mut prev_out = 0.0;
    for (i, v) in voiced.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let f = f0 * (1.0 + 0.05 * (2.0 * PI * drift_rate * t + drift_phase).sin());
        phase += f / rate;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        // First difference gives the source a gentle high-frequency tilt.
        let mut x = pulse - 0.9 * prev_out;
        prev_out = pulse;
        for r in res.iter_mut() {
            x = r.step(x);
        }
        let am = 0.65 + 0.35 * (2.0 * PI * am_rate * t + am_phase).sin();
        *v = x * am;
    }

    let speech = silence_layout(frames, cfg.silence_fraction, &mut rng);
    let mut samples = voiced;
    for (frame, &on) in speech.iter().enumerate() {
        if !on {
            samples[frame * LABEL_HOP..(frame + 1) * LABEL_HOP].fill(0.0);
        }
    }
    let speech_samples = speech.iter().filter(|&&s| s).count() * LABEL_HOP;
    let power = samples.iter().map(|x| x * x).sum::<f64>() / speech_samples.max(1) as f64;
    let noise_std = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    for s in samples.iter_mut() {
        *s += noise.sample(&mut rng);
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    let samples = samples
        .into_iter()
        .map(|x| quantize_pcm16(x * gain) as f64 / 32768.0)
        .collect();
    Utterance {
        wave: Waveform::new(samples, DEFAULT_SAMPLE_RATE),
        speech,
    }
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

/// Writes `wav/`, `labels/` and `manifest.tsv` under `out`. Paths inside the
/// manifest are relative to `out`.
pub fn generate_corpus(out: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let speakers: Vec<SynthSpeaker> = (0..cfg.num_speakers)
        .map(|s| SynthSpeaker::random(derive_seed(cfg.seed, &[0, s as u64])))
        .collect();
    for dir in ["wav", "labels"] {
        fs::create_dir_all(out.join(dir)).map_err(|e| Error::io(out.join(dir), e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.num_speakers)
        .flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(s, u)| {
            let utt = synthesize(&speakers[s], cfg, derive_seed(cfg.seed, &[1, s as u64, u as u64]));
            let spk = speaker_id(s);
            let utt_id = format!("{spk}-{u:03}");
            let wav = PathBuf::from("wav").join(format!("{utt_id}.wav"));
            let lab = PathBuf::from("labels").join(format!("{utt_id}.lab"));
            write_wav(out.join(&wav), &utt.wave)?;
            let bytes: Vec<u8> = utt.speech.iter().map(|&on| if on { b'1' } else { b'0' }).collect();
            fs::write(out.join(&lab), bytes).map_err(|e| Error::io(out.join(&lab), e))?;
            Ok(ManifestEntry {
                speaker: spk,
                utt_id,
                wav,
                labels: Some(lab),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
