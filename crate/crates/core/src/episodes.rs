//! Corpus manifests and few-shot episode sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::audio::{read_wav, Frontend, MelSpectrogram};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub utt_id: String,
    pub wav: PathBuf,
    /// Per-frame speech labels, when known.
    pub labels: Option<PathBuf>,
}

/// Tab-separated `speaker_id utt_id wav_path frame_labels_path`; `-` marks a
/// missing label file.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let labels = e.labels.as_ref().map_or("-".into(), |p| p.display().to_string());
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.speaker, e.utt_id, e.wav.display(), labels));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format(
                    "manifest",
                    format!("{}:{}: expected 4 tab-separated fields, got {}", path.display(), i + 1, f.len()),
                ));
            }
            Ok(ManifestEntry {
                speaker: f[0].to_string(),
                utt_id: f[1].to_string(),
                wav: base.join(f[2]),
                labels: (f[3] != "-").then(|| base.join(f[3])),
            })
        })
        .collect()
}

pub fn read_frame_labels(path: &Path) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes
        .iter()
        .filter(|b| !b.is_ascii_whitespace())
        .map(|&b| match b {
            b'1' => Ok(true),
            b'0' => Ok(false),
            other => Err(Error::format("frame_labels", format!("{}: byte {other:#x}", path.display()))),
        })
        .collect()
}

pub struct CorpusUtt {
    pub speaker: usize,
    pub utt_id: String,
    pub wav: PathBuf,
    /// Log-mel features of the whole utterance, before normalisation.
    pub mel: MelSpectrogram,
    pub speech: Option<Vec<bool>>,
}

pub struct Corpus {
    pub speakers: Vec<String>,
    pub utts: Vec<CorpusUtt>,
    /// Utterance indices per speaker.
    pub by_speaker: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn load(manifest: &Path, front: &Frontend) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::Capacity(format!("{}: empty manifest", manifest.display())));
        }
        let mut speakers: Vec<String> = entries.iter().map(|e| e.speaker.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let utts = entries
            .par_iter()
            .map(|e| {
                let wave = read_wav(&e.wav)?;
                let mel = front.features(&wave)?;
                let speech = e.labels.as_deref().map(read_frame_labels).transpose()?;
                Ok(CorpusUtt {
                    speaker: speakers.binary_search(&e.speaker).expect("speaker listed"),
                    utt_id: e.utt_id.clone(),
                    wav: e.wav.clone(),
                    mel,
                    speech,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut by_speaker = vec![Vec::new(); speakers.len()];
        for (i, u) in utts.iter().enumerate() {
            by_speaker[u.speaker].push(i);
        }
        Ok(Corpus { speakers, utts, by_speaker })
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Speakers per episode.
    pub n: usize,
    /// Utterances per speaker; one is the support, the rest are queries.
    pub m: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n: 10, m: 3 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 {
            return Err(Error::Config(format!(
                "episode needs n ≥ 2 and m ≥ 2, got n={} m={}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    /// Episodes per epoch: enough to visit each utterance once on average.
    pub fn episodes_per_epoch(&self, utterances: usize) -> usize {
        utterances.div_ceil(self.n * self.m).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Utterance of class `i` at index `i`.
    pub support: Vec<usize>,
    /// Queries grouped by class, `m − 1` per class.
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Group (speaker) index of each class.
    pub classes: Vec<usize>,
}

/// Draws `n` groups without replacement, then `m` members of each without
/// replacement. The first member drawn is the support.
pub fn sample_episode<R: Rng + ?Sized>(groups: &[Vec<usize>], cfg: &EpisodeConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    let eligible: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() >= cfg.m).collect();
    if eligible.len() < cfg.n {
        return Err(Error::Capacity(format!(
            "{} speakers have {} or more utterances, episode needs {}",
            eligible.len(),
            cfg.m,
            cfg.n
        )));
    }
    let classes: Vec<usize> = sample(rng, eligible.len(), cfg.n).into_iter().map(|i| eligible[i]).collect();
    let mut ep = Episode {
        support: Vec::with_capacity(cfg.n),
        query: Vec::with_capacity(cfg.n * (cfg.m - 1)),
        query_labels: Vec::with_capacity(cfg.n * (cfg.m - 1)),
        classes,
    };
    for (label, &g) in ep.classes.iter().enumerate() {
        let picks = sample(rng, groups[g].len(), cfg.m);
        let mut it = picks.into_iter().map(|i| groups[g][i]);
        ep.support.push(it.next().expect("m ≥ 2"));
        for u in it {
            ep.query.push(u);
            ep.query_labels.push(label);
        }
    }
    Ok(ep)
}
