//! Episodic training with SGD, Nesterov momentum and plateau decay.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{instance_norm, random_crop, FeatureConfig, MelSpectrogram};
use crate::autodiff::{Array, Tape};
use crate::checkpoint::{self, Checkpoint, OptimState, Schedule};
use crate::episodes::{sample_episode, Corpus, EpisodeConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Evaluator, Trial};
use crate::model::{episode_loss, EpisodeBatch, Model};
use crate::params::BnMode;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Epochs without a strictly better monitored value before decaying.
    pub patience: usize,
    pub max_epochs: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factor: 10.0,
            patience: 10,
            max_epochs: 500,
            min_lr: 1e-6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str| Err(Error::Config(format!("optim.{k} out of range")));
        if !(self.lr0 > 0.0) {
            return bad("lr0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.decay_factor > 1.0) {
            return bad("decay_factor");
        }
        if self.patience == 0 {
            return bad("patience");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        Ok(())
    }
}

/// One step of SGD with Nesterov momentum and coupled weight decay:
///
/// ```text
/// g' = g + λp
/// v  ← μv + g'
/// p  ← p − lr·(g' + μv)
/// ```
pub fn sgd_nesterov_step(
    names: &[String],
    params: &mut [Array],
    grads: &[Array],
    velocity: &mut [Array],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() || params.len() != names.len() {
        return Err(Error::Contract("optimiser buffers do not match parameters".into()));
    }
    for (i, name) in names.iter().enumerate() {
        let g = &grads[i];
        if g.shape() != params[i].shape() || velocity[i].shape() != params[i].shape() {
            return Err(Error::Dimension(format!(
                "`{name}`: parameter {:?}, gradient {:?}, velocity {:?}",
                params[i].shape(),
                g.shape(),
                velocity[i].shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in `{name}` at element {pos}",
                g.data()[pos]
            )));
        }
    }
    let (mu, lambda) = (cfg.momentum, cfg.weight_decay);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let v = velocity[i].data_mut();
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(grads[i].data()) {
            let g = g + lambda * *p;
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
    }
    Ok(())
}

/// Plateau schedule: a strictly lower value resets the counter; after
/// `patience` epochs without one the rate is divided by `decay_factor`.
pub fn lr_schedule(s: &mut Schedule, monitored: f64, cfg: &OptimConfig) -> Result<f64> {
    if !monitored.is_finite() {
        return Err(Error::Numeric(format!("monitored value {monitored}")));
    }
    if s.best.map_or(true, |b| monitored < b) {
        s.best = Some(monitored);
        s.since_improvement = 0;
    } else {
        s.since_improvement += 1;
        if s.since_improvement >= cfg.patience {
            s.lr /= cfg.decay_factor;
            s.since_improvement = 0;
        }
    }
    Ok(s.lr)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episode: EpisodeConfig,
    pub optim: OptimConfig,
    pub crop_seconds: f64,
    /// Overrides ⌈utterances / (N·M)⌉.
    pub episodes_per_epoch: Option<usize>,
    /// Validate every this many epochs.
    pub val_every: usize,
    pub val: EvalConfig,
    /// Write wall-clock seconds into the metrics log. Off by default so that
    /// seeded runs produce identical logs.
    pub record_time: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episode: EpisodeConfig::default(),
            optim: OptimConfig::default(),
            crop_seconds: 2.0,
            episodes_per_epoch: None,
            val_every: 1,
            val: EvalConfig::default(),
            record_time: false,
            seed: 0,
        }
    }
}

/// Held-out trials with their features loaded up front.
pub struct ValidationSet {
    pub trials: Vec<Trial>,
    pub mels: HashMap<PathBuf, MelSpectrogram>,
}

impl ValidationSet {
    pub fn eer(&self, model: &Model, cfg: EvalConfig) -> Result<f64> {
        let ev = Evaluator::new(model, cfg)?;
        let out = ev.evaluate(&self.trials, |p| {
            self.mels
                .get(p)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("{} not loaded", p.display())))
        })?;
        Ok(out.eer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_np: f64,
    /// Absent when global classification is off.
    pub loss_gc: Option<f64>,
    pub val_eer: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_np,loss_gc,val_eer,lr,seconds";

impl EpochMetrics {
    pub fn csv_row(&self, record_time: bool) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let secs = if record_time {
            format!("{:.3}", self.seconds)
        } else {
            String::new()
        };
        format!(
            "{},{:.6},{},{},{:e},{}",
            self.epoch,
            self.loss_np,
            opt(self.loss_gc),
            opt(self.val_eer),
            self.lr,
            secs
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    LearningRateFloor,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub best_val_eer: Option<f64>,
    pub stop: StopReason,
}

/// Where training writes `metrics.csv`, `last.ckpt` and `best.ckpt`.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    pub features: FeatureConfig,
}

impl TrainOutputs {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn save_checkpoint(path: Option<PathBuf>, model: &Model, out: &TrainOutputs, optim: Option<OptimState>) -> Result<()> {
    match path {
        Some(p) => checkpoint::save(
            &p,
            &Checkpoint {
                model: model.clone(),
                features: out.features.clone(),
                optim,
            },
        ),
        None => Ok(()),
    }
}

/// Trains `model` in place. Each epoch samples episodes, crops and
/// normalises fixed-length segments, takes one optimiser step per episode,
/// then validates. The plateau schedule follows validation EER, or the
/// training loss when there is no validation set. A non-finite loss or
/// gradient aborts with a numeric error; `last.ckpt` then still holds the
/// last completed epoch.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    val: Option<&ValidationSet>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainSummary> {
    cfg.optim.validate()?;
    cfg.episode.validate()?;
    if cfg.val_every == 0 {
        return Err(Error::Config("val_every must be positive".into()));
    }
    let mcfg = model.cfg.clone();
    if mcfg.global_classification && mcfg.n_classes != corpus.speakers.len() {
        return Err(Error::Config(format!(
            "model has {} classes, corpus has {} speakers",
            mcfg.n_classes,
            corpus.speakers.len()
        )));
    }
    let hop = corpus
        .utts
        .first()
        .map(|u| u.mel.hop_seconds)
        .ok_or_else(|| Error::Capacity("empty corpus".into()))?;
    let crop = crate::audio::frames_for(cfg.crop_seconds, hop);
    let per_epoch = cfg
        .episodes_per_epoch
        .unwrap_or_else(|| cfg.episode.episodes_per_epoch(corpus.len()));

    let mut metrics_file = match out.path("metrics.csv") {
        Some(p) => {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Array> = model.params.values().iter().map(|p| Array::zeros(p.shape())).collect();
    let mut sched = Schedule {
        epoch: 0,
        lr: cfg.optim.lr0,
        best: None,
        since_improvement: 0,
    };
    let mut best_val: Option<f64> = None;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.optim.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        let (mut sum_np, mut sum_gc) = (0.0, 0.0);
        for _ in 0..per_epoch {
            let ep = sample_episode(&corpus.by_speaker, &cfg.episode, &mut rng)?;
            let crops = ep
                .support
                .iter()
                .chain(&ep.query)
                .map(|&u| instance_norm(&random_crop(&corpus.utts[u].mel, crop, &mut rng)?).map(|m| m.bins))
                .collect::<Result<Vec<_>>>()?;
            let n = ep.support.len();
            let batch = EpisodeBatch {
                support: crops[..n].iter().collect(),
                query: crops[n..].iter().collect(),
                query_labels: ep.query_labels.clone(),
                class_ids: ep.classes.clone(),
            };
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let loss = episode_loss(&mcfg, &p, &mut BnMode::Train(&mut model.bn), &batch)?;
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("loss became {total} in epoch {epoch}")));
            }
            sum_np += loss.np.item();
            sum_gc += loss.gc.map_or(0.0, |g| g.item());
            let grads = p.grads(&tape.backward(loss.total)?);
            drop(p);
            let names = model.params.names().to_vec();
            sgd_nesterov_step(&names, model.params.values_mut(), &grads, &mut velocity, lr, &cfg.optim)?;
        }
        let loss_np = sum_np / per_epoch as f64;
        let loss_gc = mcfg.global_classification.then_some(sum_gc / per_epoch as f64);

        let val_eer = match val {
            Some(v) if epoch % cfg.val_every == 0 => Some(v.eer(model, cfg.val)?),
            _ => None,
        };
        let monitored = match (val, val_eer) {
            (Some(_), Some(e)) => Some(e),
            (Some(_), None) => None,
            (None, _) => Some(loss_np + loss_gc.unwrap_or(0.0)),
        };
        if let Some(m) = monitored {
            lr_schedule(&mut sched, m, &cfg.optim)?;
        }
        sched.epoch = epoch;

        let row = EpochMetrics {
            epoch,
            loss_np,
            loss_gc,
            val_eer,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: np {loss_np:.4} gc {} val {} lr {lr:e} ({:.1}s)",
            loss_gc.map_or("-".into(), |g| format!("{g:.4}")),
            val_eer.map_or("-".into(), |e| format!("{:.2}%", 100.0 * e)),
            row.seconds
        );
        if let Some((p, f)) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv_row(cfg.record_time)).map_err(|e| Error::io(&*p, e))?;
            f.flush().map_err(|e| Error::io(&*p, e))?;
        }
        epochs.push(row);

        let improved = match (val_eer, val) {
            (Some(e), _) => best_val.map_or(true, |b| e < b),
            (None, None) => true,
            (None, Some(_)) => false,
        };
        if let Some(e) = val_eer {
            if improved {
                best_val = Some(e);
            }
        }
        let optim = OptimState {
            schedule: sched.clone(),
            velocity: velocity.clone(),
        };
        save_checkpoint(out.path("last.ckpt"), model, out, Some(optim))?;
        if improved {
            save_checkpoint(out.path("best.ckpt"), model, out, None)?;
        }
        if sched.lr < cfg.optim.min_lr {
            stop = StopReason::LearningRateFloor;
            break;
        }
    }
    Ok(TrainSummary {
        epochs,
        best_val_eer: best_val,
        stop,
    })
}

/// Reads a manifest and the trial list's audio into a validation set.
pub fn load_validation(trials_path: &Path, front: &crate::audio::Frontend) -> Result<ValidationSet> {
    let trials = crate::eval::read_trials(trials_path)?;
    let mut paths: Vec<&PathBuf> = trials.iter().flat_map(|t| [&t.enroll, &t.test]).collect();
    paths.sort();
    paths.dedup();
    let mels = paths
        .into_iter()
        .map(|p| Ok((p.clone(), front.features(&crate::audio::read_wav(p)?)?)))
        .collect::<Result<_>>()?;
    Ok(ValidationSet { trials, mels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Array> {
        vec![Array::from_vec(vec![v])]
    }

    fn step(p: &mut [Array], g: &[Array], v: &mut [Array], lr: f64, mu: f64, wd: f64) -> Result<()> {
        let cfg = OptimConfig {
            momentum: mu,
            weight_decay: wd,
            ..Default::default()
        };
        sgd_nesterov_step(&["w".to_string()], p, g, v, lr, &cfg)
    }

    #[test]
    fn plain_sgd_and_zero_gradient() {
        let (mut p, mut v) = (one(1.0), one(0.0));
        step(&mut p, &one(1.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].item(), 0.9);
        let (mut p, mut v) = (one(1.0), one(0.0));
        step(&mut p, &one(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p[0].item(), 1.0);
    }

    // Hand iteration of the documented rule with μ = 0.9, g = 1, lr = 0.1:
    // v₁ = 1, p₁ = −0.1·(1 + 0.9) = −0.19;
    // v₂ = 1.9, p₂ = −0.19 − 0.1·(1 + 1.71) = −0.461.
    #[test]
    fn nesterov_two_steps() {
        let (mut p, mut v) = (one(0.0), one(0.0));
        step(&mut p, &one(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].item() + 0.19).abs() < 1e-15);
        step(&mut p, &one(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].item() + 0.461).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_and_pure_decay() {
        let (mut p, mut v) = (one(0.7), one(0.3));
        step(&mut p, &one(2.0), &mut v, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p[0].item(), 0.7);
        let (mut p, mut v) = (one(1.0), one(0.0));
        for k in 1..=4 {
            step(&mut p, &one(0.0), &mut v, 0.5, 0.0, 0.5).unwrap();
            assert_eq!(p[0].item(), 0.75f64.powi(k));
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, mut v) = (one(1.0), one(0.0));
        let err = step(&mut p, &one(f64::NAN), &mut v, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`w`")), "{err}");
        assert_eq!(p[0].item(), 1.0);
    }

    fn fresh() -> Schedule {
        Schedule {
            epoch: 0,
            lr: 0.1,
            best: None,
            since_improvement: 0,
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimConfig::default();
        let mut s = fresh();
        for e in 0..30 {
            assert_eq!(lr_schedule(&mut s, 1.0 - e as f64 * 0.01, &cfg).unwrap(), 0.1);
        }
        let mut s = fresh();
        for epoch in 1..=11 {
            let lr = lr_schedule(&mut s, 0.3, &cfg).unwrap();
            assert_eq!(lr, if epoch < 11 { 0.1 } else { 0.01 }, "epoch {epoch}");
        }
        let mut s = fresh();
        for _ in 0..31 {
            lr_schedule(&mut s, 0.3, &cfg).unwrap();
        }
        assert!((s.lr - 1e-4).abs() < 1e-18);
        assert!(lr_schedule(&mut s, f64::NAN, &cfg).is_err());
    }
}
