//! Waveform I/O and the log-mel front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-5;
const MEL_MAGIC: &[u8; 8] = b"CAPMEL01";

/// Mono PCM audio with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a RIFF/WAVE PCM16 mono file; samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file))
        .map_err(|e| Error::format("riff", format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format("sample_format", "only integer PCM is supported"));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::format(
            "bits_per_sample",
            format!("expected 16, found {}", spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(Error::format(
            "channels",
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_rate == 0 {
        return Err(Error::format("sample_rate", "zero sample rate"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("data", format!("{}: {e}", path.display())))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes PCM16 mono. Samples are rounded to the nearest 1/32768 step.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("riff", other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &wav.samples {
        w.write_sample(quantize_pcm16(s)).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

pub fn quantize_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Front-end settings. Defaults: 25 ms Hamming window, 10 ms hop, 512-point
/// FFT, 40 HTK mel bands over 0–8 kHz, log compression on.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub n_mels: usize,
    pub f_lo: f64,
    pub f_hi: Option<f64>,
    pub log_input: bool,
    pub preemphasis: Option<f64>,
    /// Accept audio whose rate differs from `sample_rate`, rescaling the
    /// window and hop to that rate.
    pub allow_sr: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window_seconds: 0.025,
            hop_seconds: 0.010,
            n_mels: 40,
            f_lo: 0.0,
            f_hi: None,
            log_input: true,
            preemphasis: None,
            allow_sr: false,
        }
    }
}

/// Log-mel energies, `n_mels × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub bins: Array,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.bins.rows()
    }

    pub fn frames(&self) -> usize {
        self.bins.cols()
    }

    /// Columns `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<MelSpectrogram> {
        let t = self.frames();
        if len == 0 || start + len > t {
            return Err(Error::Length(format!(
                "frames {start}..{} outside {t}",
                start + len
            )));
        }
        let rows = self.n_mels();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.bins.row(r)[start..start + len]);
        }
        Ok(MelSpectrogram {
            bins: Array::new(&[rows, len], data)?,
            ..*self
        })
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters, `n_mels × (n_fft/2 + 1)`, peak height 1.
pub fn mel_matrix(n_mels: usize, n_fft: usize, sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Array> {
    if f_hi > sample_rate / 2.0 || f_lo < 0.0 || f_lo >= f_hi {
        return Err(Error::Domain(format!(
            "mel band [{f_lo}, {f_hi}] invalid for sample rate {sample_rate}"
        )));
    }
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    Array::new(&[n_mels, bins], w)
}

/// Framing, FFT and mel projection for one sample rate.
pub struct Frontend {
    cfg: FeatureConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    mel: Array,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend")
            .field("sample_rate", &self.sample_rate)
            .field("win", &self.win)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl Frontend {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        Self::for_rate(cfg, cfg.sample_rate)
    }

    /// Front end for audio at `rate`; window and hop are recomputed from
    /// their durations.
    pub fn for_rate(cfg: &FeatureConfig, rate: u32) -> Result<Self> {
        if rate != cfg.sample_rate && !cfg.allow_sr {
            return Err(Error::format(
                "sample_rate",
                format!("expected {} Hz, found {rate} Hz", cfg.sample_rate),
            ));
        }
        let win = (cfg.window_seconds * rate as f64).round() as usize;
        let hop = (cfg.hop_seconds * rate as f64).round() as usize;
        if win < 2 || hop == 0 {
            return Err(Error::Config("window or hop shorter than one sample".into()));
        }
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let f_hi = cfg.f_hi.unwrap_or(rate as f64 / 2.0);
        let mel = mel_matrix(cfg.n_mels, n_fft, rate as f64, cfg.f_lo, f_hi)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Frontend {
            cfg: cfg.clone(),
            sample_rate: rate,
            win,
            hop,
            n_fft,
            window,
            mel,
            fft,
        })
    }

    pub fn window_samples(&self) -> usize {
        self.win
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    pub fn mel_matrix(&self) -> &Array {
        &self.mel
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.win {
            0
        } else {
            1 + (num_samples - self.win) / self.hop
        }
    }

    /// Power spectrogram, `(n_fft/2 + 1) × T`.
    pub fn spectrogram(&self, wav: &Waveform) -> Result<Array> {
        if wav.sample_rate != self.sample_rate {
            return Err(Error::format(
                "sample_rate",
                format!("front end built for {} Hz, got {}", self.sample_rate, wav.sample_rate),
            ));
        }
        let t = self.num_frames(wav.samples.len());
        if t == 0 {
            return Err(Error::Length(format!(
                "{} samples is shorter than one {}-sample window",
                wav.samples.len(),
                self.win
            )));
        }
        let samples: Vec<f64> = match self.cfg.preemphasis {
            Some(a) => std::iter::once(wav.samples[0])
                .chain(wav.samples.windows(2).map(|w| w[1] - a * w[0]))
                .collect(),
            None => wav.samples.clone(),
        };
        let bins = self.n_fft / 2 + 1;
        let mut out = vec![0.0; bins * t];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..t {
            let frame = &samples[f * self.hop..f * self.hop + self.win];
            for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(x * w, 0.0);
            }
            for slot in buf[self.win..].iter_mut() {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[k * t + f] = buf[k].norm_sqr();
            }
        }
        Array::new(&[bins, t], out)
    }

    /// Mel projection of a power spectrogram, log-compressed when enabled.
    pub fn log_mel(&self, spec: &Array) -> Result<MelSpectrogram> {
        if spec.ndim() != 2 || spec.rows() != self.mel.cols() {
            return Err(Error::Dimension(format!(
                "spectrogram {:?} vs mel matrix {:?}",
                spec.shape(),
                self.mel.shape()
            )));
        }
        if spec.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("negative power in spectrogram".into()));
        }
        let (m, k, t) = (self.mel.rows(), self.mel.cols(), spec.cols());
        let mut out = vec![0.0; m * t];
        for i in 0..m {
            let w = self.mel.row(i);
            let dst = &mut out[i * t..(i + 1) * t];
            for (kk, &wk) in w.iter().enumerate().take(k) {
                if wk == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(&spec.data()[kk * t..(kk + 1) * t]) {
                    *d += wk * s;
                }
            }
        }
        if self.cfg.log_input {
            out.iter_mut().for_each(|v| *v = (*v + LOG_FLOOR).ln());
        }
        Ok(MelSpectrogram {
            bins: Array::new(&[m, t], out)?,
            hop_seconds: self.cfg.hop_seconds,
            window_seconds: self.cfg.window_seconds,
        })
    }

    /// Log-mel features. Audio at another rate goes through a front end
    /// rebuilt for that rate, which fails unless `allow_sr` is set.
    pub fn features(&self, wav: &Waveform) -> Result<MelSpectrogram> {
        if wav.sample_rate != self.sample_rate {
            let other = Frontend::for_rate(&self.cfg, wav.sample_rate)?;
            return other.log_mel(&other.spectrogram(wav)?);
        }
        self.log_mel(&self.spectrogram(wav)?)
    }
}

/// Per-bin mean and variance normalisation over time. The divisor is the
/// population standard deviation, floored at `NORM_EPS`.
pub fn instance_norm(m: &MelSpectrogram) -> Result<MelSpectrogram> {
    let t = m.frames();
    if t < 2 {
        return Err(Error::Length(format!("instance norm needs 2+ frames, got {t}")));
    }
    let mut data = m.bins.data().to_vec();
    for row in data.chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let sd = var.sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(MelSpectrogram {
        bins: Array::new(m.bins.shape(), data)?,
        ..*m
    })
}

/// Contiguous window of `frames` columns at a uniformly drawn start.
pub fn random_crop<R: Rng + ?Sized>(m: &MelSpectrogram, frames: usize, rng: &mut R) -> Result<MelSpectrogram> {
    let t = m.frames();
    if t < frames {
        return Err(Error::Length(format!(
            "utterance has {t} frames, crop needs {frames}"
        )));
    }
    let start = rng.gen_range(0..=t - frames);
    m.window(start, frames)
}

/// Frames in a crop of `seconds` at the default 10 ms hop.
pub fn frames_for(seconds: f64, hop_seconds: f64) -> usize {
    (seconds / hop_seconds).round() as usize
}

pub fn write_mel(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(24 + 8 * m.bins.len());
    bytes.extend_from_slice(MEL_MAGIC);
    bytes.extend_from_slice(&(m.n_mels() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.frames() as u64).to_le_bytes());
    for v in m.bins.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != MEL_MAGIC {
        return Err(Error::format("header", "missing CAPMEL01 magic"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(8), word(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format("shape", "overflow"))?;
    if bytes.len() - 24 != expected {
        return Err(Error::format(
            "data",
            format!("{rows}x{cols} needs {expected} bytes, found {}", bytes.len() - 24),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram {
        bins: Array::new(&[rows, cols], data)?,
        hop_seconds: 0.010,
        window_seconds: 0.025,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frontend() -> Frontend {
        Frontend::new(&FeatureConfig::default()).unwrap()
    }

    fn tone(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * 16000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let s = frontend().spectrogram(&tone(1000.0, 0.5, 0.5)).unwrap();
        for f in 0..s.cols() {
            let col: Vec<f64> = (0..s.rows()).map(|k| s.at(&[k, f])).collect();
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn frame_count_and_silence() {
        let fe = frontend();
        let z = Waveform::new(vec![0.0; 32000], 16000);
        let s = fe.spectrogram(&z).unwrap();
        assert_eq!(s.shape(), &[257, 198]);
        assert!(s.data().iter().all(|&v| v == 0.0));
        let m = fe.log_mel(&s).unwrap();
        assert!(m.bins.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert!(matches!(
            fe.spectrogram(&Waveform::new(vec![0.0; 399], 16000)),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn mel_matrix_construction() {
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        let w = mel_matrix(40, 512, 16000.0, 0.0, 8000.0).unwrap();
        assert_eq!(w.shape(), &[40, 257]);
        for r in 0..40 {
            let row = w.row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            // unimodal: rises then falls
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(row[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(row[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
        // interior bins are covered, and overlapping triangles sum to at most 1
        for k in 1..256 {
            let col: Vec<f64> = (0..40).map(|r| w.at(&[r, k])).collect();
            assert!(col.iter().any(|&v| v > 0.0), "bin {k} uncovered");
            assert!(col.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn doubling_amplitude_shifts_log_mel_by_log4() {
        let fe = frontend();
        let a = fe.features(&tone(1000.0, 0.3, 0.2)).unwrap();
        let b = fe.features(&tone(1000.0, 0.3, 0.4)).unwrap();
        // the band holding the tone
        let band = (0..40)
            .max_by(|&i, &j| a.bins.at(&[i, 5]).partial_cmp(&a.bins.at(&[j, 5])).unwrap())
            .unwrap();
        for f in 0..a.frames() {
            let d = b.bins.at(&[band, f]) - a.bins.at(&[band, f]);
            assert!((d - 4f64.ln()).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn log_mel_is_monotone() {
        let fe = frontend();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = Array::uniform(&[257, 6], 0.0, 2.0, &mut r);
        let bigger = s.map(|v| v * 1.5 + 0.1);
        let (a, b) = (fe.log_mel(&s).unwrap(), fe.log_mel(&bigger).unwrap());
        assert!(a.bins.data().iter().zip(b.bins.data()).all(|(x, y)| y >= x));
    }

    fn mel(rows: usize, cols: usize, seed: u64) -> MelSpectrogram {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram {
            bins: Array::randn(&[rows, cols], 3.0, &mut r),
            hop_seconds: 0.01,
            window_seconds: 0.025,
        }
    }

    #[test]
    fn instance_norm_properties() {
        let mut m = mel(4, 50, 2);
        for t in 0..50 {
            m.bins.set(&[0, t], 7.5);
        }
        let n = instance_norm(&m).unwrap();
        assert!(n.bins.row(0).iter().all(|&v| v == 0.0));
        for r in 1..4 {
            let row = n.bins.row(r);
            let mean = row.iter().sum::<f64>() / 50.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        let affine = MelSpectrogram {
            bins: m.bins.map(|v| 2.5 * v - 4.0),
            ..m.clone()
        };
        assert!(instance_norm(&affine).unwrap().bins.max_abs_diff(&n.bins) < 1e-9);
        let twice = instance_norm(&n).unwrap();
        assert!(twice.bins.max_abs_diff(&n.bins) < 1e-6);
        assert!(matches!(instance_norm(&mel(3, 1, 0)), Err(Error::Length(_))));
    }

    #[test]
    fn random_crop_shapes_and_coverage() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let exact = mel(40, 200, 4);
        assert_eq!(random_crop(&exact, 200, &mut r).unwrap(), exact);
        assert!(matches!(random_crop(&mel(40, 199, 4), 200, &mut r), Err(Error::Length(_))));

        let long = mel(40, 230, 5);
        let mut seen = vec![false; 31];
        for _ in 0..10_000 {
            let c = random_crop(&long, 200, &mut r).unwrap();
            assert_eq!(c.bins.shape(), &[40, 200]);
            let first = c.bins.at(&[0, 0]);
            let start = (0..31).find(|&s| long.bins.at(&[0, s]) == first).unwrap();
            seen[start] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn time_shift_by_one_hop_shifts_frames() {
        let fe = frontend();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..4000).map(|_| r.gen_range(-0.5..0.5)).collect();
        let a = fe.spectrogram(&Waveform::new(x.clone(), 16000)).unwrap();
        let b = fe.spectrogram(&Waveform::new(x[160..].to_vec(), 16000)).unwrap();
        for k in 0..257 {
            for f in 0..b.cols() {
                assert_eq!(b.at(&[k, f]), a.at(&[k, f + 1]));
            }
        }
    }

    #[test]
    fn wav_round_trip_and_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..16000).map(|i| quantize_pcm16(((i as f64) * 0.01).sin() * 0.3) as f64 / 32768.0).collect();
        let w = Waveform::new(samples, 16000);
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples.len(), 16000);
        assert_eq!(back, w);

        let z = dir.path().join("z.wav");
        write_wav(&z, &Waveform::new(vec![0.0; 100], 16000)).unwrap();
        assert!(read_wav(&z).unwrap().samples.iter().all(|&v| v == 0.0));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..20 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        let err = read_wav(&stereo).unwrap_err();
        assert!(matches!(err, Error::Format { field: "channels", .. }), "{err}");

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"RIFFxxxxWAVEjunk").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::Format { .. })));
    }

    #[test]
    fn sample_rate_policy() {
        let cfg = FeatureConfig::default();
        assert!(Frontend::for_rate(&cfg, 8000).is_err());
        let fe = Frontend::for_rate(
            &FeatureConfig {
                allow_sr: true,
                ..cfg.clone()
            },
            8000,
        )
        .unwrap();
        assert_eq!((fe.window_samples(), fe.hop_samples()), (200, 80));
        let wav = Waveform::new(vec![0.1; 8000], 8000);
        assert!(matches!(
            Frontend::new(&cfg).unwrap().features(&wav),
            Err(Error::Format { field: "sample_rate", .. })
        ));
        let lenient = Frontend::new(&FeatureConfig { allow_sr: true, ..cfg }).unwrap();
        assert_eq!(lenient.features(&wav).unwrap().frames(), 98);
    }

    #[test]
    fn mel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = mel(40, 17, 7);
        write_mel(&p, &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"CAPMEL01");
        assert_eq!(bytes.len(), 24 + 40 * 17 * 8);
        assert_eq!(read_mel(&p).unwrap(), m);
    }
}
