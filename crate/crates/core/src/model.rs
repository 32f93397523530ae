//! Encoder, head and classifier assembled into one trainable model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, stack, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::{
    cap_pair_plan, combined_loss, global_softmax_loss, np_loss, np_loss_from_distances,
    paired_distances, CLASS_WEIGHT_STD,
};
use crate::params::{BnBank, BnMode, Bound, ParamStore};
use crate::pooling::{build_head, cap_pair, cap_side, sap, tap, CapSide, PoolingConfig, PoolingMode};
use crate::trunk::{build_trunk, trunk_forward, TrunkConfig};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub pooling: PoolingConfig,
    /// Adds the global softmax term over all training speakers.
    pub global_classification: bool,
    /// Training speakers; sizes the class-weight matrix.
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            trunk: TrunkConfig::default(),
            pooling: PoolingConfig::default(),
            global_classification: true,
            n_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.pooling.validate()?;
        if self.global_classification && self.n_classes == 0 {
            return Err(Error::Config("global classification needs n_classes > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub bn: BnBank,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = BnBank::new();
        build_trunk(&cfg.trunk, &mut params, &mut bn, &mut rng)?;
        build_head(&cfg.pooling, cfg.trunk.frame_dim, cfg.trunk.embed_dim, &mut params, &mut rng)?;
        if cfg.global_classification {
            params.insert(
                "gc.w",
                Array::randn(&[cfg.n_classes, cfg.trunk.embed_dim], CLASS_WEIGHT_STD, &mut rng),
            );
        }
        Ok(Model { cfg, params, bn })
    }

    pub fn mode(&self) -> PoolingMode {
        self.cfg.pooling.mode
    }

    /// Frame features in eval mode for equally long mels.
    pub fn frames<'t>(&self, p: &Bound<'t>, mels: &[&Array]) -> Result<Vec<Var<'t>>> {
        trunk_forward(&self.cfg.trunk, p, mels, &mut BnMode::Eval(&self.bn), None)
    }

    /// Instance-wise (TAP/SAP) embeddings, one row per mel.
    pub fn embed_instances(&self, mels: &[&Array]) -> Result<Array> {
        if self.mode().is_pairwise() {
            return Err(Error::Contract("CAP embeddings depend on the pair".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let frames = self.frames(&p, mels)?;
        let rows = instance_embeddings(&self.cfg, &p, &frames)?;
        let out = rows.value().clone();
        Ok(out)
    }
}

/// One episode's inputs: N supports (class `i` at index `i`), then queries.
pub struct EpisodeBatch<'a> {
    pub support: Vec<&'a Array>,
    pub query: Vec<&'a Array>,
    /// Episode class of each query, in `0..N`.
    pub query_labels: Vec<usize>,
    /// Training-speaker index of each episode class.
    pub class_ids: Vec<usize>,
}

pub struct EpisodeLoss<'t> {
    pub np: Var<'t>,
    pub gc: Option<Var<'t>>,
    pub total: Var<'t>,
    /// Distances entering the prototypical term.
    pub np_pairs: usize,
    /// Embeddings entering global classification.
    pub gc_count: usize,
}

fn embed_rows<'t>(pooled: &[Var<'t>], p: &Bound<'t>) -> Result<Var<'t>> {
    stack(pooled)?.matmul(p.get("embed.w")?.transpose()?)
}

/// Pooled and projected embeddings of instance-wise heads, `n × E`.
pub fn instance_embeddings<'t>(cfg: &ModelConfig, p: &Bound<'t>, frames: &[Var<'t>]) -> Result<Var<'t>> {
    let pooled = frames
        .iter()
        .map(|&f| match cfg.pooling.mode {
            PoolingMode::Tap => tap(f),
            PoolingMode::Sap => Ok(sap(f, p.get("sap.w")?, p.get("sap.b")?, p.get("sap.mu")?)?.e),
            PoolingMode::Cap => Err(Error::Contract("CAP has no instance embedding".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    embed_rows(&pooled, p)
}

/// Builds the combined loss of one episode. The encoder runs once over all
/// utterances, so batchnorm sees each episode exactly once.
pub fn episode_loss<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    mode: &mut BnMode<'_>,
    batch: &EpisodeBatch<'_>,
) -> Result<EpisodeLoss<'t>> {
    let n = batch.support.len();
    if n < 2 {
        return Err(Error::Contract(format!("episode needs N ≥ 2 classes, got {n}")));
    }
    if batch.class_ids.len() != n || batch.query_labels.len() != batch.query.len() {
        return Err(Error::Contract("episode labels do not match utterances".into()));
    }
    let mels: Vec<&Array> = batch.support.iter().chain(&batch.query).copied().collect();
    let frames = trunk_forward(&cfg.trunk, p, &mels, mode, None)?;
    let gc_w = if cfg.global_classification {
        Some(p.get("gc.w")?)
    } else {
        None
    };

    let (np, gc, np_pairs, gc_count) = if cfg.pooling.mode.is_pairwise() {
        let plan = cap_pair_plan(n, &batch.query_labels)?;
        let sides = frames
            .iter()
            .map(|&f| cap_side(f, p, &cfg.pooling))
            .collect::<Result<Vec<CapSide<'t>>>>()?;
        let tau = cfg.pooling.effective_tau();
        let mut es = Vec::with_capacity(plan.pairs.len());
        let mut eq = Vec::with_capacity(plan.pairs.len());
        for &(q, y) in &plan.pairs {
            let pair = cap_pair(&sides[y], &sides[n + q], tau)?;
            es.push(pair.e_s);
            eq.push(pair.e_q);
        }
        let xs = embed_rows(&es, p)?;
        let xq = embed_rows(&eq, p)?;
        let dist = paired_distances(xq, xs)?.reshape(&[batch.query.len(), n])?;
        let np = np_loss_from_distances(dist, &batch.query_labels)?;
        let gc = match gc_w {
            Some(w) => {
                let pos_s: Vec<Var<'t>> = plan.positives.iter().map(|&i| es[i]).collect();
                let pos_q: Vec<Var<'t>> = plan.positives.iter().map(|&i| eq[i]).collect();
                let rows = concat(&[embed_rows(&pos_s, p)?, embed_rows(&pos_q, p)?], 0)?;
                let labels: Vec<usize> = plan
                    .positives
                    .iter()
                    .chain(&plan.positives)
                    .map(|&i| batch.class_ids[plan.pairs[i].1])
                    .collect();
                Some(global_softmax_loss(rows, w, &labels)?)
            }
            None => None,
        };
        (np, gc, plan.pairs.len(), plan.gc_count())
    } else {
        let rows = instance_embeddings(cfg, p, &frames)?;
        let total = mels.len();
        let protos = rows.slice(0, 0, n)?;
        let queries = rows.slice(0, n, total)?;
        let np = np_loss(queries, protos, &batch.query_labels)?;
        let gc = match gc_w {
            Some(w) => {
                let labels: Vec<usize> = batch
                    .class_ids
                    .iter()
                    .copied()
                    .chain(batch.query_labels.iter().map(|&y| batch.class_ids[y]))
                    .collect();
                Some(global_softmax_loss(rows, w, &labels)?)
            }
            None => None,
        };
        (np, gc, batch.query.len() * n, total)
    };
    let total = match gc {
        Some(g) => combined_loss(np, g)?,
        None => np,
    };
    Ok(EpisodeLoss {
        np,
        gc,
        total,
        np_pairs,
        gc_count: if gc.is_some() { gc_count } else { 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_graph, FD_STEP};

    fn tiny(mode: PoolingMode, gc: bool) -> ModelConfig {
        ModelConfig {
            trunk: TrunkConfig {
                stage_channels: [2, 2, 4, 8],
                stage_blocks: [1, 1, 1, 1],
                frame_dim: 8,
                embed_dim: 6,
                n_mels: 40,
            },
            pooling: PoolingConfig {
                mode,
                hidden: 8,
                tau: 0.5,
                ..Default::default()
            },
            global_classification: gc,
            n_classes: 5,
        }
    }

    fn mels(count: usize, t: usize, seed: u64) -> Vec<Array> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Array::randn(&[40, t], 1.0, &mut r)).collect()
    }

    fn batch(m: &[Array], n: usize) -> EpisodeBatch<'_> {
        let q = m.len() - n;
        EpisodeBatch {
            support: m[..n].iter().collect(),
            query: m[n..].iter().collect(),
            query_labels: (0..q).map(|i| i % n).collect(),
            class_ids: (0..n).map(|i| (i * 2) % 5).collect(),
        }
    }

    #[test]
    fn structure_per_mode() {
        let m = mels(9, 12, 1);
        for (mode, gc, pairs, count) in [
            (PoolingMode::Cap, true, 18, 12),
            (PoolingMode::Tap, true, 18, 9),
            (PoolingMode::Sap, false, 18, 0),
            (PoolingMode::Cap, false, 18, 0),
        ] {
            let cfg = tiny(mode, gc);
            let mut model = Model::new(cfg.clone(), 3).unwrap();
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let l = episode_loss(&cfg, &p, &mut BnMode::Train(&mut model.bn), &batch(&m, 3)).unwrap();
            assert_eq!((l.np_pairs, l.gc_count), (pairs, count), "{mode:?}");
            assert!(l.total.item().is_finite());
            match l.gc {
                Some(g) => assert_eq!(l.total.item(), l.np.item() + g.item()),
                None => assert_eq!(l.total.item(), l.np.item()),
            }
        }
        assert!(!Model::new(tiny(PoolingMode::Tap, true), 0).unwrap().params.contains("cap.phi.w"));
        assert!(Model::new(tiny(PoolingMode::Cap, true), 0).unwrap().params.contains("cap.phi.w"));
    }

    #[test]
    fn full_cap_episode_gradient() {
        let cfg = tiny(PoolingMode::Cap, true);
        let model = Model::new(cfg.clone(), 4).unwrap();
        let m = mels(6, 12, 2);
        let b = batch(&m, 3);
        let report = check_graph(model.params.values(), FD_STEP, |_, vars| {
            let p = Bound::with_vars(&model.params, vars.to_vec())?;
            let mut bank = model.bn.clone();
            Ok(episode_loss(&cfg, &p, &mut BnMode::Train(&mut bank), &b)?.total)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn instance_embeddings_need_instance_heads() {
        let model = Model::new(tiny(PoolingMode::Cap, false), 0).unwrap();
        let m = mels(2, 16, 3);
        assert!(matches!(model.embed_instances(&[&m[0]]), Err(Error::Contract(_))));
        let model = Model::new(tiny(PoolingMode::Sap, false), 0).unwrap();
        assert_eq!(model.embed_instances(&[&m[0], &m[1]]).unwrap().shape(), &[2, 6]);
    }
}
