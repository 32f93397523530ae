//! Finite-difference check of every differentiable op and of one full CAP
//! training episode. Backs the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_graph, concat, stack, Array, BnRunning, BnStats, GradCheck, Tape, Var, FD_STEP};
use crate::error::Result;
use crate::model::{episode_loss, EpisodeBatch, Model, ModelConfig};
use crate::objectives::{global_softmax_loss, np_loss};
use crate::params::{BnMode, Bound, ParamStore};
use crate::pooling::{build_head, cap_pair, cap_side, sap, tap, PoolingConfig, PoolingMode};
use crate::trunk::TrunkConfig;

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;

type Graph = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

struct Case {
    name: &'static str,
    params: Vec<Array>,
    graph: Graph,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub check: GradCheck,
}

impl OpReport {
    pub fn passes(&self) -> bool {
        self.check.passes(GRAD_TOL)
    }
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element reaches the loss with a distinct coefficient.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let mut r = ChaCha8Rng::seed_from_u64(shape.iter().fold(17, |a, &d| a * 31 + d as u64));
    let w = out.tape().constant(Array::randn(&shape, 1.0, &mut r));
    Ok(out.mul(w)?.sum_all())
}

fn case(
    name: &'static str,
    params: Vec<Array>,
    graph: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
) -> Case {
    Case {
        name,
        params,
        graph: Box::new(graph),
    }
}

fn head_case(name: &'static str, mode: PoolingMode, rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = PoolingConfig {
        mode,
        hidden: 5,
        tau: 0.5,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    build_head(&cfg, 4, 3, &mut store, rng)?;
    let mut params = vec![Array::randn(&[4, 6], 1.0, rng), Array::randn(&[4, 5], 1.0, rng)];
    params.extend(store.values().iter().cloned());
    Ok(case(name, params, move |_, v| {
        let p = Bound::with_vars(&store, v[2..].to_vec())?;
        let w = p.get("embed.w")?;
        let (a, b) = match cfg.mode {
            PoolingMode::Tap => (tap(v[0])?, tap(v[1])?),
            PoolingMode::Sap => {
                let (sw, sb, mu) = (p.get("sap.w")?, p.get("sap.b")?, p.get("sap.mu")?);
                (sap(v[0], sw, sb, mu)?.e, sap(v[1], sw, sb, mu)?.e)
            }
            PoolingMode::Cap => {
                let pair = cap_pair(&cap_side(v[0], &p, &cfg)?, &cap_side(v[1], &p, &cfg)?, cfg.effective_tau())?;
                (pair.e_s, pair.e_q)
            }
        };
        project(w.matmul(stack(&[a, b])?.transpose()?)?)
    }))
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut out = vec![
        case("matmul", vec![Array::randn(&[3, 4], 1.0, r), Array::randn(&[4, 5], 1.0, r)], |_, v| {
            project(v[0].matmul(v[1])?)
        }),
        case("add/sub/mul", vec![Array::randn(&[3, 4], 1.0, r), Array::randn(&[3, 4], 1.0, r)], |_, v| {
            project(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.5).add_scalar(1.0))
        }),
        case("relu", vec![Array::randn(&[4, 5], 1.0, r)], |_, v| project(v[0].relu())),
        case("tanh", vec![Array::randn(&[4, 5], 1.0, r)], |_, v| project(v[0].tanh())),
        case("exp", vec![Array::randn(&[4, 5], 0.5, r)], |_, v| project(v[0].exp())),
        case("log", vec![Array::uniform(&[4, 5], 0.5, 2.0, r)], |_, v| project(v[0].log()?)),
        case("softmax", vec![Array::randn(&[3, 6], 1.0, r)], |_, v| {
            project(v[0].softmax(1)?.add(v[0].softmax(0)?)?)
        }),
        case("log_softmax", vec![Array::randn(&[3, 6], 1.0, r)], |_, v| project(v[0].log_softmax(1)?)),
        case("l2norm", vec![Array::randn(&[4, 3], 1.0, r)], |_, v| {
            project(concat(&[v[0].l2norm(0)?, v[0].l2norm_floor(1, 1e-12)?], 0)?)
        }),
        case("sum/mean", vec![Array::randn(&[3, 4, 2], 1.0, r)], |_, v| {
            project(v[0].sum(1)?.add(v[0].mean(1)?.scale(3.0))?)?.add(v[0].mean_all())
        }),
        case("along", vec![Array::randn(&[3, 4], 1.0, r), Array::uniform(&[4], 0.5, 2.0, r)], |_, v| {
            project(v[0].add_along(v[1], 0)?.mul_along(v[1], 0)?.div_along(v[1].exp(), 0)?)
        }),
        case("shape ops", vec![Array::randn(&[2, 3, 4], 1.0, r)], |_, v| {
            let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose()?;
            let s = concat(&[p.slice(0, 1, 4)?, p.slice(0, 0, 2)?], 0)?;
            project(stack(&[s.pick(&[0, 3, 1, 2, 0])?, s.slice(1, 0, 1)?.reshape(&[5])?])?)
        }),
        case("conv2d", vec![Array::randn(&[2, 2, 5, 6], 1.0, r), Array::randn(&[3, 2, 3, 3], 0.5, r)], |_, v| {
            project(v[0].conv2d(v[1], (1, 1))?)?.add(project(v[0].conv2d(v[1], (2, 2))?)?)
        }),
        case("maxpool2d", vec![Array::randn(&[2, 2, 5, 6], 1.0, r)], |_, v| {
            project(v[0].maxpool2d((3, 3), (2, 2))?)
        }),
        case(
            "batchnorm2d",
            vec![Array::randn(&[3, 2, 2, 3], 1.0, r), Array::uniform(&[3], 0.5, 1.5, r), Array::randn(&[3], 0.5, r)],
            |_, v| {
                let mut stats = BnStats::new(3);
                project(v[0].batchnorm2d(v[1], v[2], BnRunning::Train(&mut stats))?)
            },
        ),
        case("np loss", vec![Array::randn(&[4, 3], 1.0, r), Array::randn(&[2, 3], 1.0, r)], |_, v| {
            np_loss(v[0], v[1], &[0, 1, 1, 0])
        }),
        case("global softmax", vec![Array::randn(&[4, 3], 1.0, r), Array::randn(&[5, 3], 0.1, r)], |_, v| {
            global_softmax_loss(v[0], v[1], &[4, 0, 2, 2])
        }),
    ];
    out.push(head_case("tap head", PoolingMode::Tap, r)?);
    out.push(head_case("sap head", PoolingMode::Sap, r)?);
    out.push(head_case("cap head", PoolingMode::Cap, r)?);
    Ok(out)
}

/// Checks each op on small random inputs drawn from `seed`.
pub fn check_ops(seed: u64) -> Result<Vec<OpReport>> {
    cases(seed)?
        .into_iter()
        .map(|c| {
            Ok(OpReport {
                name: c.name,
                check: check_graph(&c.params, FD_STEP, |t, v| (c.graph)(t, v))?,
            })
        })
        .collect()
}

/// Smallest configuration exercising every component of CAP training:
/// tiny trunk with D = E = 8, meta-projection H = 8, N = 3 classes with
/// M = 2 utterances each of 12 frames, global classification on.
pub fn pipeline_config() -> ModelConfig {
    ModelConfig {
        trunk: TrunkConfig {
            stage_channels: [2, 2, 4, 8],
            stage_blocks: [1, 1, 1, 1],
            frame_dim: 8,
            embed_dim: 8,
            n_mels: 40,
        },
        pooling: PoolingConfig {
            mode: PoolingMode::Cap,
            hidden: 8,
            ..Default::default()
        },
        global_classification: true,
        n_classes: 5,
    }
}

/// Checks the gradient of the combined episode loss with respect to every
/// model parameter.
pub fn check_pipeline(seed: u64) -> Result<GradCheck> {
    let cfg = pipeline_config();
    let model = Model::new(cfg.clone(), seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (n, m, t) = (3, 2, 12);
    let mels: Vec<Array> = (0..n * m).map(|_| Array::randn(&[40, t], 1.0, &mut r)).collect();
    let batch = EpisodeBatch {
        support: mels[..n].iter().collect(),
        query: mels[n..].iter().collect(),
        query_labels: (0..n * (m - 1)).map(|i| i % n).collect(),
        class_ids: vec![4, 1, 2],
    };
    check_graph(model.params.values(), FD_STEP, |_, vars| {
        let p = Bound::with_vars(&model.params, vars.to_vec())?;
        let mut bank = model.bn.clone();
        Ok(episode_loss(&cfg, &p, &mut BnMode::Train(&mut bank), &batch)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fault::{inject, Fault};

    #[test]
    fn every_op_passes() {
        for rep in check_ops(1).unwrap() {
            assert!(rep.passes(), "{}: {:?}", rep.name, rep.check);
            assert!(rep.check.checked > 0, "{}", rep.name);
        }
    }

    #[test]
    fn injected_faults_are_caught() {
        for (fault, op) in [
            (Fault::Matmul, "matmul"),
            (Fault::Relu, "relu"),
            (Fault::Tanh, "tanh"),
            (Fault::Softmax, "softmax"),
            (Fault::Conv2d, "conv2d"),
            (Fault::BatchNorm, "batchnorm2d"),
        ] {
            let _g = inject(fault);
            let reps = check_ops(2).unwrap();
            let rep = reps.iter().find(|r| r.name == op).unwrap();
            assert!(!rep.passes(), "{op} fault went unnoticed");
        }
        assert!(check_ops(2).unwrap().iter().all(OpReport::passes));
    }
}
