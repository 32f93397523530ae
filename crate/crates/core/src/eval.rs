//! Trial scoring, EER and minimum detection cost.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{instance_norm, MelSpectrogram};
use crate::autodiff::{stack, Array, Tape};
use crate::episodes::ManifestEntry;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::pooling::{cap_pair, cap_side, CapSide, PoolingMode};
use crate::trunk::time_stride;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.05,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }
}

/// Error counts at one threshold, accepting scores `>= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct OperatingPoint {
    threshold: f64,
    false_accepts: usize,
    misses: usize,
}

/// Every distinct score as a threshold in increasing order, then `+∞`
/// (reject everything).
fn operating_points(scores: &[f64], labels: &[bool]) -> Result<(Vec<OperatingPoint>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let targets = labels.iter().filter(|&&l| l).count();
    let nontargets = labels.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Contract(format!(
            "need both classes, got {targets} targets and {nontargets} nontargets"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    let (mut fa, mut miss) = (nontargets, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(OperatingPoint {
            threshold,
            false_accepts: fa,
            misses: miss,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        false_accepts: 0,
        misses: targets,
    });
    Ok((points, targets, nontargets))
}

/// Equal error rate and the threshold where the false-accept and
/// false-reject curves cross, interpolating linearly between the two
/// operating points that bracket the crossing.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (points, nt, nn) = operating_points(scores, labels)?;
    let rates = |p: &OperatingPoint| (p.false_accepts as f64 / nn as f64, p.misses as f64 / nt as f64);
    let k = points
        .iter()
        .position(|p| {
            let (far, frr) = rates(p);
            frr >= far
        })
        .expect("reject-all point has frr 1 ≥ far 0");
    let (far, frr) = rates(&points[k]);
    if far == frr || k == 0 {
        return Ok((far, points[k].threshold));
    }
    let (far0, frr0) = rates(&points[k - 1]);
    let (d0, d1) = (far0 - frr0, far - frr);
    let alpha = d0 / (d0 - d1);
    let eer = far0 + alpha * (far - far0);
    let (t0, t1) = (points[k - 1].threshold, points[k].threshold);
    let threshold = if t1.is_finite() { t0 + alpha * (t1 - t0) } else { t0 };
    Ok((eer, threshold))
}

/// Normalised detection cost at one operating point.
pub fn normalized_dcf(p_miss: f64, p_fa: f64, dcf: &DcfParams) -> f64 {
    let cost = dcf.c_miss * dcf.p_target * p_miss + dcf.c_fa * (1.0 - dcf.p_target) * p_fa;
    cost / (dcf.c_miss * dcf.p_target).min(dcf.c_fa * (1.0 - dcf.p_target))
}

/// Minimum normalised cost over all thresholds, with its threshold. The
/// reject-everything point bounds the result by 1.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], dcf: &DcfParams) -> Result<(f64, f64)> {
    dcf.validate()?;
    let (points, nt, nn) = operating_points(scores, labels)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &points {
        let c = normalized_dcf(p.misses as f64 / nt as f64, p.false_accepts as f64 / nn as f64, dcf);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: PathBuf,
    pub test: PathBuf,
}

/// `label enroll_path test_path` per line, label 1 or 0. Relative paths are
/// resolved against the list's directory.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::format("trial_list", format!("{}:{}: {msg}", path.display(), i + 1));
            if f.len() != 3 {
                return Err(bad("expected `label enroll test`"));
            }
            let target = match f[0] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 1 or 0")),
            };
            Ok(Trial {
                target,
                enroll: base.join(f[1]),
                test: base.join(f[2]),
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial], relative_to: &Path) -> Result<()> {
    let rel = |p: &Path| p.strip_prefix(relative_to).unwrap_or(p).display().to_string();
    let text: String = trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.target), rel(&t.enroll), rel(&t.test)))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Every same-speaker pair as a target trial, plus as many nontarget trials
/// drawn uniformly from cross-speaker pairs without repetition.
pub fn build_trials<R: rand::Rng + ?Sized>(entries: &[ManifestEntry], rng: &mut R) -> Vec<Trial> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            let t = Trial {
                target: a.speaker == b.speaker,
                enroll: a.wav.clone(),
                test: b.wav.clone(),
            };
            if t.target {
                targets.push(t);
            } else {
                nontargets.push(t);
            }
        }
    }
    let k = targets.len().min(nontargets.len());
    let mut picks = rand::seq::index::sample(rng, nontargets.len(), k).into_vec();
    picks.sort_unstable();
    targets.extend(picks.into_iter().map(|i| nontargets[i].clone()));
    targets
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMetric {
    /// Cosine similarity of the two embeddings.
    #[default]
    Cosine,
    /// Prototypical distance with the enrolment embedding as prototype.
    Np,
}

impl std::str::FromStr for ScoreMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScoreMetric::Cosine),
            "np" => Ok(ScoreMetric::Np),
            _ => Err(Error::Config(format!("unknown score metric `{s}` (cosine | np)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub segments: usize,
    pub segment_seconds: f64,
    pub metric: ScoreMetric,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segments: 10,
            segment_seconds: 3.5,
            metric: ScoreMetric::Cosine,
            dcf: DcfParams::default(),
        }
    }
}

impl EvalConfig {
    /// Frames a waveform of `segment_seconds` yields.
    pub fn segment_frames(&self, mel: &MelSpectrogram) -> usize {
        let window = (mel.window_seconds / mel.hop_seconds).round();
        let span = (self.segment_seconds / mel.hop_seconds).round();
        (span - window).max(0.0) as usize + 1
    }
}

/// `n` windows of `frames` columns with starts spread evenly over the whole
/// valid range, both ends included.
pub fn crop_segments(mel: &MelSpectrogram, n: usize, frames: usize) -> Result<Vec<MelSpectrogram>> {
    let t = mel.frames();
    if n == 0 {
        return Err(Error::Contract("need at least one segment".into()));
    }
    if t < frames {
        return Err(Error::Length(format!(
            "utterance has {t} frames, segment needs {frames}"
        )));
    }
    let range = t - frames;
    (0..n)
        .map(|i| {
            let start = if n == 1 {
                0
            } else {
                ((i * range) as f64 / (n - 1) as f64).round() as usize
            };
            mel.window(start, frames)
        })
        .collect()
}

/// Per-utterance state needed to score trials.
#[derive(Clone, Debug)]
pub enum Encoded {
    /// One embedding row per segment (instance-wise heads).
    Embeddings(Array),
    /// Frame features per segment (pairwise head).
    Frames(Vec<Array>),
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// `x̃ · p / ‖p‖` with the enrolment side as prototype.
pub fn np_score(test: &[f64], enroll: &[f64]) -> f64 {
    let dot: f64 = test.iter().zip(enroll).map(|(x, y)| x * y).sum();
    dot / enroll.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

pub struct Evaluator<'m> {
    model: &'m Model,
    /// Pooling and embedding parameters, bound per trial.
    head: ParamStore,
    pub cfg: EvalConfig,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Per trial, `None` where an utterance was too short.
    pub scores: Vec<Option<f64>>,
    pub skipped: usize,
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m Model, cfg: EvalConfig) -> Result<Self> {
        cfg.dcf.validate()?;
        let mut head = ParamStore::new();
        for (name, value) in model.params.iter() {
            if name.starts_with("cap.") || name == "embed.w" {
                head.insert(name, value.clone());
            }
        }
        Ok(Evaluator { model, head, cfg })
    }

    /// Normalised segments through the encoder (and, for instance-wise heads,
    /// through pooling and embedding).
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Encoded> {
        let segs = crop_segments(mel, self.cfg.segments, self.cfg.segment_frames(mel))?
            .iter()
            .map(|s| instance_norm(s).map(|m| m.bins))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array> = segs.iter().collect();
        if self.model.mode().is_pairwise() {
            let tape = Tape::new();
            let p = self.model.params.bind(&tape, false);
            let frames = self.model.frames(&p, &refs)?;
            Ok(Encoded::Frames(frames.iter().map(|f| f.value().clone()).collect()))
        } else {
            Ok(Encoded::Embeddings(self.model.embed_instances(&refs)?))
        }
    }

    fn pair_score(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.cfg.metric {
            ScoreMetric::Cosine => cosine(a, b),
            ScoreMetric::Np => np_score(b, a),
        }
    }

    /// Mean over all segment pairings of the enrol and test utterances.
    pub fn score(&self, enroll: &Encoded, test: &Encoded) -> Result<f64> {
        let (ea, eb) = match (enroll, test) {
            (Encoded::Embeddings(a), Encoded::Embeddings(b)) => (a.clone(), b.clone()),
            (Encoded::Frames(a), Encoded::Frames(b)) => self.cap_embeddings(a, b)?,
            _ => return Err(Error::Contract("encodings come from different pooling modes".into())),
        };
        let (na, nb) = (ea.rows(), eb.rows());
        let mut total = 0.0;
        match (enroll, test) {
            (Encoded::Frames(_), _) => {
                // Row k of both matrices belongs to segment pair k.
                for k in 0..na {
                    total += self.pair_score(ea.row(k), eb.row(k));
                }
                Ok(total / na as f64)
            }
            _ => {
                for i in 0..na {
                    for j in 0..nb {
                        total += self.pair_score(ea.row(i), eb.row(j));
                    }
                }
                Ok(total / (na * nb) as f64)
            }
        }
    }

    /// CAP embeddings of every (enrol segment, test segment) pairing, the
    /// enrolment side in the support role.
    fn cap_embeddings(&self, a: &[Array], b: &[Array]) -> Result<(Array, Array)> {
        let tape = Tape::new();
        let p = self.head.bind(&tape, false);
        let side = |f: &Array| cap_side(tape.constant(f.clone()), &p, &self.model.cfg.pooling);
        let sa = a.iter().map(side).collect::<Result<Vec<CapSide<'_>>>>()?;
        let sb = b.iter().map(side).collect::<Result<Vec<CapSide<'_>>>>()?;
        let tau = self.model.cfg.pooling.effective_tau();
        let (mut es, mut eq) = (Vec::new(), Vec::new());
        for s in &sa {
            for q in &sb {
                let pair = cap_pair(s, q, tau)?;
                es.push(pair.e_s);
                eq.push(pair.e_q);
            }
        }
        let wt = p.get("embed.w")?.transpose()?;
        let xs = stack(&es)?.matmul(wt)?.value().clone();
        let xq = stack(&eq)?.matmul(wt)?.value().clone();
        Ok((xs, xq))
    }

    /// Scores every trial. Utterances too short for one segment are skipped
    /// with a warning, along with their trials.
    pub fn evaluate<F>(&self, trials: &[Trial], load: F) -> Result<EvalOutcome>
    where
        F: Fn(&Path) -> Result<MelSpectrogram> + Sync,
    {
        if trials.is_empty() {
            return Err(Error::Contract("empty trial list".into()));
        }
        let mut paths: Vec<&Path> = trials
            .iter()
            .flat_map(|t| [t.enroll.as_path(), t.test.as_path()])
            .collect();
        paths.sort();
        paths.dedup();
        let encoded: HashMap<&Path, Option<Encoded>> = paths
            .par_iter()
            .map(|&p| match load(p).and_then(|m| self.encode(&m)) {
                Ok(e) => Ok((p, Some(e))),
                Err(Error::Length(msg)) => {
                    log::warn!("skipping {}: {msg}", p.display());
                    Ok((p, None))
                }
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let scores = trials
            .par_iter()
            .map(|t| match (&encoded[t.enroll.as_path()], &encoded[t.test.as_path()]) {
                (Some(a), Some(b)) => self.score(a, b).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let (kept, labels): (Vec<f64>, Vec<bool>) = scores
            .iter()
            .zip(trials)
            .filter_map(|(s, t)| s.map(|s| (s, t.target)))
            .unzip();
        let skipped = trials.len() - kept.len();
        let (eer, eer_threshold) = compute_eer(&kept, &labels)?;
        let (min_dcf, dcf_threshold) = compute_min_dcf(&kept, &labels, &self.cfg.dcf)?;
        Ok(EvalOutcome {
            scores,
            skipped,
            eer,
            eer_threshold,
            min_dcf,
            dcf_threshold,
        })
    }
}

/// `score label enroll test` per scored trial, 6 decimals.
pub fn format_scores(trials: &[Trial], scores: &[Option<f64>]) -> String {
    trials
        .iter()
        .zip(scores)
        .filter_map(|(t, s)| {
            s.map(|s| {
                format!(
                    "{s:.6} {} {} {}\n",
                    u8::from(t.target),
                    t.enroll.display(),
                    t.test.display()
                )
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionSide {
    /// Normalised mel input, one row per band.
    pub mel: Vec<Vec<f64>>,
    /// Attention over encoder frames; sums to 1.
    pub frame_weights: Vec<f64>,
    /// Mel frames per encoder frame.
    pub upsample: usize,
    /// Encoder frame covering each mel frame.
    pub frame_map: Vec<usize>,
}

impl AttentionSide {
    /// Encoder-frame weight seen by each mel frame.
    pub fn mel_weights(&self) -> Vec<f64> {
        self.frame_map.iter().map(|&i| self.frame_weights[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionDump {
    pub pair_id: String,
    /// Same speaker, when known.
    pub label: Option<bool>,
    pub enroll: AttentionSide,
    pub test: AttentionSide,
}

/// Cross-attention weights of a pair over whole utterances, the enrolment
/// side in the support role.
pub fn dump_attention(
    model: &Model,
    enroll: &MelSpectrogram,
    test: &MelSpectrogram,
    pair_id: &str,
    label: Option<bool>,
) -> Result<AttentionDump> {
    if model.mode() != PoolingMode::Cap {
        return Err(Error::Contract(format!(
            "attention dump needs a cap model, got {}",
            model.mode()
        )));
    }
    let (a, b) = (instance_norm(enroll)?, instance_norm(test)?);
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let fa = model.frames(&p, &[&a.bins])?[0];
    let fb = model.frames(&p, &[&b.bins])?[0];
    let cfg = &model.cfg.pooling;
    let pair = cap_pair(&cap_side(fa, &p, cfg)?, &cap_side(fb, &p, cfg)?, cfg.effective_tau())?;
    let side = |m: &MelSpectrogram, w: &Array| {
        let up = time_stride();
        let tp = w.len();
        AttentionSide {
            mel: (0..m.n_mels()).map(|r| m.bins.row(r).to_vec()).collect(),
            frame_weights: w.data().to_vec(),
            upsample: up,
            frame_map: (0..m.frames()).map(|t| (t / up).min(tp - 1)).collect(),
        }
    };
    let (ws, wq) = (pair.w_s.value().clone(), pair.w_q.value().clone());
    Ok(AttentionDump {
        pair_id: pair_id.to_string(),
        label,
        enroll: side(&a, &ws),
        test: side(&b, &wq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pooling::PoolingConfig;
    use crate::trunk::TrunkConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent oracle: FAR/FRR evaluated by direct counting at a
    // threshold below every score, at each midpoint between adjacent
    // distinct scores, and above every score.
    fn oracle_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut cuts = vec![distinct[0] - 1.0];
        cuts.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cuts.push(distinct[distinct.len() - 1] + 1.0);
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        cuts.iter()
            .map(|&c| {
                let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= c).count();
                let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s < c).count();
                (c, fa as f64 / nn, miss as f64 / nt)
            })
            .collect()
    }

    fn oracle_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let pts = oracle_points(scores, labels);
        let k = pts.iter().position(|p| p.2 >= p.1).unwrap();
        if pts[k].1 == pts[k].2 || k == 0 {
            return pts[k].1;
        }
        let (d0, d1) = (pts[k - 1].1 - pts[k - 1].2, pts[k].1 - pts[k].2);
        pts[k - 1].1 + d0 / (d0 - d1) * (pts[k].1 - pts[k - 1].1)
    }

    fn oracle_dcf(scores: &[f64], labels: &[bool], p: &DcfParams) -> f64 {
        oracle_points(scores, labels)
            .iter()
            .map(|&(_, fa, miss)| normalized_dcf(miss, fa, p))
            .fold(f64::INFINITY, f64::min)
    }

    fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse grid so ties are common.
        let scores = labels
            .iter()
            .map(|&l| ((rng.gen::<f64>() + if l { 0.3 } else { 0.0 }) * 20.0).round() / 20.0)
            .collect();
        (scores, labels)
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DcfParams::default();
        for _ in 0..1000 {
            let (s, l) = random_set(&mut rng);
            assert_eq!(compute_eer(&s, &l).unwrap().0, oracle_eer(&s, &l), "{s:?} {l:?}");
            assert_eq!(compute_min_dcf(&s, &l, &p).unwrap().0, oracle_dcf(&s, &l, &p));
        }
    }

    #[test]
    fn hand_cases() {
        let l = [true, true, false, false];
        assert_eq!(compute_eer(&[0.9, 0.8, 0.2, 0.1], &l).unwrap().0, 0.0);
        assert_eq!(compute_eer(&[0.8, 0.4, 0.6, 0.2], &l).unwrap().0, 0.5);
        let p = DcfParams::default();
        assert_eq!(compute_min_dcf(&[0.9, 0.8, 0.2, 0.1], &l, &p).unwrap().0, 0.0);
        assert!((normalized_dcf(0.0, 1.0, &p) - 19.0).abs() < 1e-12);
        assert_eq!(normalized_dcf(1.0, 0.0, &p), 1.0);
        // Fully inverted scores: reject-all is optimal.
        assert_eq!(compute_min_dcf(&[0.1, 0.2, 0.8, 0.9], &l, &p).unwrap(), (1.0, f64::INFINITY));
        assert!(matches!(compute_eer(&[0.1, 0.2], &[true, true]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn metric_invariances(seed in any::<u64>()) {
            let (s, l) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
            let p = DcfParams::default();
            let (eer, _) = compute_eer(&s, &l).unwrap();
            let (dcf, _) = compute_min_dcf(&s, &l, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&dcf));
            let mono: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(compute_eer(&mono, &l).unwrap().0, eer);
            prop_assert_eq!(compute_min_dcf(&mono, &l, &p).unwrap().0, dcf);
            let (s2, l2) = ([s.clone(), s.clone()].concat(), [l.clone(), l.clone()].concat());
            prop_assert_eq!(compute_eer(&s2, &l2).unwrap().0, eer);
        }
    }

    fn mel(t: usize, seed: u64) -> MelSpectrogram {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram {
            bins: Array::randn(&[40, t], 1.0, &mut r),
            hop_seconds: 0.01,
            window_seconds: 0.025,
        }
    }

    #[test]
    fn segment_layout() {
        let cfg = EvalConfig::default();
        // 12.5 s of audio.
        let m = mel(1 + (200_000 - 400) / 160, 0);
        let frames = cfg.segment_frames(&m);
        assert_eq!(frames, 348);
        let segs = crop_segments(&m, 10, frames).unwrap();
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.bins.row(0)[0], m.bins.row(0)[100 * i]);
        }
        let exact = mel(348, 1);
        let segs = crop_segments(&exact, 10, 348).unwrap();
        assert!(segs.iter().all(|s| s == &exact));
        assert!(matches!(crop_segments(&mel(300, 2), 10, 348), Err(Error::Length(_))));
    }

    fn tiny_model(mode: PoolingMode) -> Model {
        let cfg = ModelConfig {
            trunk: TrunkConfig::tiny(2),
            pooling: PoolingConfig {
                mode,
                hidden: 8,
                ..Default::default()
            },
            global_classification: false,
            n_classes: 0,
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn scoring_identities() {
        let cfg = EvalConfig {
            segments: 3,
            ..Default::default()
        };
        let (a, b) = (mel(400, 3), mel(380, 4));
        let tap = tiny_model(PoolingMode::Tap);
        let ev = Evaluator::new(&tap, cfg).unwrap();
        let ea = ev.encode(&a).unwrap();
        let self_score = ev.score(&ea, &ea).unwrap();
        let ident = ev.encode(&mel(348, 5)).unwrap();
        assert!((ev.score(&ident, &ident).unwrap() - 1.0).abs() < 1e-12);
        assert!(self_score <= 1.0 + 1e-12);

        let cap = tiny_model(PoolingMode::Cap);
        let ev = Evaluator::new(&cap, cfg).unwrap();
        let (ea, eb) = (ev.encode(&a).unwrap(), ev.encode(&b).unwrap());
        let (ab, ba) = (ev.score(&ea, &eb).unwrap(), ev.score(&eb, &ea).unwrap());
        assert!((ab - ba).abs() < 1e-12, "{ab} {ba}");
        assert!(ab.is_finite());
    }

    #[test]
    fn attention_dump_shapes() {
        let cap = tiny_model(PoolingMode::Cap);
        let (a, b) = (mel(203, 6), mel(150, 7));
        let d = dump_attention(&cap, &a, &b, "p0", Some(false)).unwrap();
        assert_eq!(d.enroll.frame_weights.len(), 51);
        assert_eq!(d.test.frame_weights.len(), 38);
        assert_eq!(d.enroll.frame_map.len(), 203);
        assert_eq!(d.enroll.upsample, 4);
        assert_eq!(d.enroll.mel.len(), 40);
        for s in [&d.enroll, &d.test] {
            assert!((s.frame_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let json = serde_json::to_string(&d).unwrap();
        assert!(serde_json::from_str::<AttentionDump>(&json).unwrap() == d);
        let tap = tiny_model(PoolingMode::Tap);
        assert!(matches!(dump_attention(&tap, &a, &b, "p", None), Err(Error::Contract(_))));
    }
}
