//! Residual convolutional frame encoder.
//!
//! Input mels `F × T` pass through a 7×7 stem, a 3×3 max-pool and four
//! stages of basic blocks. Strides are per axis, (freq, time): stem (2,1),
//! pool (1,1), stages (1,1), (2,2), (2,2), (1,1). A fully connected layer
//! over the flattened `C·F'` column then yields `D × ceil(T/4)` features.

use rand::Rng;

use crate::autodiff::{Array, BnStats, Var};
use crate::error::{Error, Result};
use crate::params::{BnBank, BnMode, Bound, ParamStore};

pub const STEM_KERNEL: usize = 7;
pub const STEM_STRIDE: (usize, usize) = (2, 1);
pub const POOL_KERNEL: usize = 3;
pub const STAGE_STRIDES: [(usize, usize); 4] = [(1, 1), (2, 2), (2, 2), (1, 1)];
/// Shortest input the encoder accepts, in frames.
pub const MIN_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub frame_dim: usize,
    pub embed_dim: usize,
    pub n_mels: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            stage_channels: [16, 32, 64, 128],
            stage_blocks: [3, 4, 6, 3],
            frame_dim: 128,
            embed_dim: 512,
            n_mels: 40,
        }
    }
}

impl TrunkConfig {
    /// Channels (c, 2c, 4c, 8c) with one block per stage and `D = 8c`.
    pub fn tiny(c: usize) -> Self {
        TrunkConfig {
            stage_channels: [c, 2 * c, 4 * c, 8 * c],
            stage_blocks: [1, 1, 1, 1],
            frame_dim: 8 * c,
            embed_dim: 8 * c,
            n_mels: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.stage_blocks.contains(&0) {
            return Err(Error::Config("trunk channels and blocks must be positive".into()));
        }
        if self.frame_dim != self.stage_channels[3] {
            return Err(Error::Config(format!(
                "trunk.frame_dim {} must equal the last stage width {}",
                self.frame_dim, self.stage_channels[3]
            )));
        }
        if self.embed_dim == 0 || self.n_mels == 0 {
            return Err(Error::Config("trunk.embed_dim and trunk.n_mels must be positive".into()));
        }
        Ok(())
    }

    /// Frequency extent reaching the collapse layer.
    pub fn collapsed_freq(&self) -> usize {
        let stem = self.n_mels.div_ceil(STEM_STRIDE.0);
        STAGE_STRIDES
            .iter()
            .fold(stem, |f, s| f.div_ceil(s.0))
    }

    pub fn out_frames(&self, t: usize) -> usize {
        STAGE_STRIDES.iter().fold(t, |t, s| t.div_ceil(s.1))
    }
}

/// Mel frames per output frame.
pub fn time_stride() -> usize {
    STEM_STRIDE.1 * STAGE_STRIDES.iter().map(|s| s.1).product::<usize>()
}

fn conv_name(stage: usize, block: usize, part: &str) -> String {
    format!("trunk.s{}.b{}.{part}", stage + 1, block)
}

fn add_bn(store: &mut ParamStore, bank: &mut BnBank, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Array::ones(&[c]));
    store.insert(format!("{name}.beta"), Array::zeros(&[c]));
    bank.insert(name.to_string(), BnStats::new(c));
}

fn he_conv<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Array {
    let fan_in = (c_in * k * k) as f64;
    Array::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Adds encoder parameters to `store` and fresh statistics to `bank`.
pub fn build_trunk<R: Rng + ?Sized>(
    cfg: &TrunkConfig,
    store: &mut ParamStore,
    bank: &mut BnBank,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let c0 = cfg.stage_channels[0];
    store.insert("trunk.stem.w", he_conv(c0, 1, STEM_KERNEL, rng));
    add_bn(store, bank, "trunk.stem.bn", c0);
    let mut c_in = c0;
    for s in 0..4 {
        let c = cfg.stage_channels[s];
        for b in 0..cfg.stage_blocks[s] {
            let stride = if b == 0 { STAGE_STRIDES[s] } else { (1, 1) };
            store.insert(conv_name(s, b, "conv1.w"), he_conv(c, c_in, 3, rng));
            add_bn(store, bank, &conv_name(s, b, "bn1"), c);
            store.insert(conv_name(s, b, "conv2.w"), he_conv(c, c, 3, rng));
            add_bn(store, bank, &conv_name(s, b, "bn2"), c);
            if c_in != c || stride != (1, 1) {
                store.insert(conv_name(s, b, "short.w"), he_conv(c, c_in, 1, rng));
                add_bn(store, bank, &conv_name(s, b, "short.bn"), c);
            }
            c_in = c;
        }
    }
    let flat = c_in * cfg.collapsed_freq();
    store.insert(
        "trunk.collapse.w",
        Array::randn(&[cfg.frame_dim, flat], (1.0 / flat as f64).sqrt(), rng),
    );
    store.insert("trunk.collapse.b", Array::zeros(&[cfg.frame_dim]));
    Ok(())
}

/// Encoder parameter count: convolutions, batchnorm affines and the
/// collapse layer (running statistics excluded).
pub fn trunk_param_count(store: &ParamStore) -> usize {
    store.count("trunk.")
}

fn bn<'t>(x: Var<'t>, p: &Bound<'t>, mode: &mut BnMode<'_>, name: &str) -> Result<Var<'t>> {
    x.batchnorm2d(
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        mode.running(name)?,
    )
}

/// Per-utterance `[C, F, T]` shapes after the stem and each stage, in order
/// `conv1`..`conv5`.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Encodes a batch of equally long `F × T` mels into `D × T'` features.
pub fn trunk_forward<'t>(
    cfg: &TrunkConfig,
    p: &Bound<'t>,
    mels: &[&Array],
    mode: &mut BnMode<'_>,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Vec<Var<'t>>> {
    let first = mels
        .first()
        .ok_or_else(|| Error::Length("empty batch".into()))?;
    let (f, t) = (first.rows(), first.cols());
    if first.ndim() != 2 || f != cfg.n_mels {
        return Err(Error::Dimension(format!(
            "expected {} × T mels, got {:?}",
            cfg.n_mels,
            first.shape()
        )));
    }
    if t < MIN_FRAMES {
        return Err(Error::Length(format!("{t} frames, encoder needs {MIN_FRAMES}")));
    }
    if let Some(m) = mels.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::Dimension(format!(
            "batch mixes {:?} and {:?}",
            first.shape(),
            m.shape()
        )));
    }
    let b = mels.len();
    let mut data = Vec::with_capacity(b * f * t);
    for m in mels {
        data.extend_from_slice(m.data());
    }
    let tape = p.get("trunk.stem.w")?.tape();
    let x = tape.constant(Array::new(&[1, b, f, t], data)?);

    let mut record = |name: String, v: &Var<'t>| {
        if let Some(tr) = trace.as_deref_mut() {
            let s = v.shape();
            tr.push((name, vec![s[0], s[2], s[3]]));
        }
    };

    let mut x = x.conv2d(p.get("trunk.stem.w")?, STEM_STRIDE)?;
    x = bn(x, p, mode, "trunk.stem.bn")?.relu();
    x = x.maxpool2d((POOL_KERNEL, POOL_KERNEL), (1, 1))?;
    record("conv1".into(), &x);
    for s in 0..4 {
        for blk in 0..cfg.stage_blocks[s] {
            let stride = if blk == 0 { STAGE_STRIDES[s] } else { (1, 1) };
            let mut h = x.conv2d(p.get(&conv_name(s, blk, "conv1.w"))?, stride)?;
            h = bn(h, p, mode, &conv_name(s, blk, "bn1"))?.relu();
            h = h.conv2d(p.get(&conv_name(s, blk, "conv2.w"))?, (1, 1))?;
            h = bn(h, p, mode, &conv_name(s, blk, "bn2"))?;
            let short_name = conv_name(s, blk, "short.w");
            let short = if p.get(&short_name).is_ok() {
                let sc = x.conv2d(p.get(&short_name)?, stride)?;
                bn(sc, p, mode, &conv_name(s, blk, "short.bn"))?
            } else {
                x
            };
            x = h.add(short)?.relu();
        }
        record(format!("conv{}", s + 2), &x);
    }
    let cols = freq_collapse(x, p.get("trunk.collapse.w")?, p.get("trunk.collapse.b")?)?;
    let tp = x.shape()[3];
    (0..b).map(|i| cols.slice(1, i * tp, (i + 1) * tp)).collect()
}

/// `[C, B, F, T] → [D, B·T]`: one affine map from each time step's flattened
/// `C·F` column to `D`, shared across time and batch.
pub fn freq_collapse<'t>(x: Var<'t>, w: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (c, b, f, t) = match s.as_slice() {
        &[c, b, f, t] => (c, b, f, t),
        &[c, f, t] => (c, 1, f, t),
        _ => return Err(Error::Dimension(format!("freq_collapse of {s:?}"))),
    };
    let x = x.reshape(&[c, b, f, t])?;
    let cols = x.permute(&[0, 2, 1, 3])?.reshape(&[c * f, b * t])?;
    w.matmul(cols)?.add_along(bias, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_graph, Tape, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &TrunkConfig, seed: u64) -> (ParamStore, BnBank) {
        let mut store = ParamStore::new();
        let mut bank = BnBank::new();
        build_trunk(cfg, &mut store, &mut bank, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, bank)
    }

    fn run(cfg: &TrunkConfig, store: &ParamStore, bank: &BnBank, mels: &[&Array]) -> Vec<Array> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        trunk_forward(cfg, &p, mels, &mut BnMode::Eval(bank), None)
            .unwrap()
            .iter()
            .map(|v| v.value().clone())
            .collect()
    }

    #[test]
    fn default_shapes_and_size() {
        let cfg = TrunkConfig::default();
        let (store, mut bank) = build(&cfg, 0);
        let n = trunk_param_count(&store);
        assert!((n as f64 - 1.4e6).abs() / 1.4e6 < 0.10, "{n}");

        let mel = Array::randn(&[40, 200], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut trace = ShapeTrace::new();
        let out = trunk_forward(&cfg, &p, &[&mel], &mut BnMode::Train(&mut bank), Some(&mut trace)).unwrap();
        let got: Vec<Vec<usize>> = trace.iter().map(|t| t.1.clone()).collect();
        assert_eq!(
            got,
            vec![
                vec![16, 20, 200],
                vec![16, 20, 200],
                vec![32, 10, 100],
                vec![64, 5, 50],
                vec![128, 5, 50],
            ]
        );
        assert_eq!(out[0].shape(), vec![128, 50]);
    }

    #[test]
    fn short_inputs() {
        let cfg = TrunkConfig::tiny(2);
        let (store, bank) = build(&cfg, 0);
        let mel = Array::ones(&[40, 8]);
        assert_eq!(run(&cfg, &store, &bank, &[&mel])[0].shape(), &[16, 2]);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let short = Array::ones(&[40, 7]);
        assert!(matches!(
            trunk_forward(&cfg, &p, &[&short], &mut BnMode::Eval(&bank), None),
            Err(Error::Length(_))
        ));
        for t in [12, 16, 40, 80] {
            let m = Array::ones(&[40, t]);
            assert_eq!(run(&cfg, &store, &bank, &[&m])[0].cols(), t / 4);
        }
    }

    #[test]
    fn smoke_and_determinism() {
        let cfg = TrunkConfig {
            stage_channels: [2, 2, 2, 2],
            stage_blocks: [1, 1, 1, 1],
            frame_dim: 2,
            embed_dim: 4,
            n_mels: 40,
        };
        let (a, bank) = build(&cfg, 5);
        let (b, _) = build(&cfg, 5);
        assert_eq!(a, b);
        let mel = Array::randn(&[40, 20], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = run(&cfg, &a, &bank, &[&mel]);
        assert_eq!(out[0].shape(), &[2, 5]);
        assert!(out[0].is_finite());
        let bad = TrunkConfig {
            frame_dim: 3,
            ..cfg
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn eval_is_batch_independent() {
        let cfg = TrunkConfig::tiny(2);
        let (store, bank) = build(&cfg, 3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let m1 = Array::randn(&[40, 24], 1.0, &mut r);
        let m2 = Array::randn(&[40, 24], 1.0, &mut r);
        let both = run(&cfg, &store, &bank, &[&m1, &m2]);
        let alone = run(&cfg, &store, &bank, &[&m2]);
        assert!(both[1].max_abs_diff(&alone[0]) < 1e-12);
        assert_eq!(run(&cfg, &store, &bank, &[&m1])[0], run(&cfg, &store, &bank, &[&m1])[0]);
    }

    /// Receptive-field half-width in input frames along time.
    fn time_radius(cfg: &TrunkConfig) -> usize {
        // (kernel, stride) along time for every layer on the longest path
        let mut layers = vec![(STEM_KERNEL, STEM_STRIDE.1), (POOL_KERNEL, 1)];
        for s in 0..4 {
            for b in 0..cfg.stage_blocks[s] {
                let st = if b == 0 { STAGE_STRIDES[s].1 } else { 1 };
                layers.push((3, st));
                layers.push((3, 1));
            }
        }
        let (mut r, mut jump) = (0, 1);
        for (k, s) in layers {
            r += (k / 2) * jump;
            jump *= s;
        }
        r
    }

    #[test]
    fn temporal_locality() {
        let cfg = TrunkConfig::tiny(2);
        let (store, bank) = build(&cfg, 6);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let t = 160;
        let mel = Array::randn(&[40, t], 1.0, &mut r);
        let (t0, t1) = (100, 108);
        let mut changed = mel.clone();
        for f in 0..40 {
            for tt in t0..t1 {
                changed.set(&[f, tt], changed.at(&[f, tt]) + 3.0);
            }
        }
        let a = &run(&cfg, &store, &bank, &[&mel])[0];
        let b = &run(&cfg, &store, &bank, &[&changed])[0];
        let rad = time_radius(&cfg);
        // output frame j sees input frames [4j - rad, 4j + 3 + rad] at most
        for j in 0..a.cols() {
            let lo = (4 * j).saturating_sub(rad);
            let hi = 4 * j + 3 + rad;
            let touches = hi >= t0 && lo < t1;
            let diff = (0..a.rows()).map(|d| (a.at(&[d, j]) - b.at(&[d, j])).abs()).fold(0.0, f64::max);
            if !touches {
                assert_eq!(diff, 0.0, "frame {j} changed outside radius {rad}");
            }
        }
        assert!(a.max_abs_diff(b) > 0.0);
    }

    #[test]
    fn freq_collapse_cases() {
        // averaging weights over C = D = 2 channels with F' = 3
        let tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = Array::randn(&[2, 3, 4], 1.0, &mut r);
        let mut w = Array::zeros(&[2, 6]);
        for c in 0..2 {
            for f in 0..3 {
                w.set(&[c, c * 3 + f], 1.0 / 3.0);
            }
        }
        let y = freq_collapse(tape.constant(x.clone()), tape.constant(w), tape.constant(Array::zeros(&[2])))
            .unwrap()
            .value()
            .clone();
        for c in 0..2 {
            for t in 0..4 {
                let mean = (0..3).map(|f| x.at(&[c, f, t])).sum::<f64>() / 3.0;
                assert!((y.at(&[c, t]) - mean).abs() < 1e-12);
            }
        }

        // time permutation commutes with the map
        let w = Array::randn(&[3, 6], 1.0, &mut r);
        let bias = Array::randn(&[3], 1.0, &mut r);
        let perm = [2, 0, 3, 1];
        let mut xp = x.clone();
        for c in 0..2 {
            for f in 0..3 {
                for (t, &src) in perm.iter().enumerate() {
                    xp.set(&[c, f, t], x.at(&[c, f, src]));
                }
            }
        }
        let apply = |x: &Array| {
            let tape = Tape::new();
            let v = freq_collapse(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone())).unwrap();
            let out = v.value().clone();
            out
        };
        let (y, yp) = (apply(&x), apply(&xp));
        for d in 0..3 {
            for (t, &src) in perm.iter().enumerate() {
                assert_eq!(yp.at(&[d, t]), y.at(&[d, src]));
            }
        }

        let params = vec![
            Array::randn(&[4, 5, 6], 1.0, &mut r),
            Array::randn(&[3, 20], 1.0, &mut r),
            Array::randn(&[3], 1.0, &mut r),
        ];
        let report = check_graph(&params, FD_STEP, |_, v| {
            let y = freq_collapse(v[0], v[1], v[2])?;
            Ok(y.tanh().sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn whole_trunk_gradient() {
        let cfg = TrunkConfig {
            stage_channels: [2, 2, 2, 2],
            stage_blocks: [1, 1, 1, 1],
            frame_dim: 2,
            embed_dim: 2,
            n_mels: 40,
        };
        let (store, bank) = build(&cfg, 9);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let mels = [Array::randn(&[40, 16], 1.0, &mut r), Array::randn(&[40, 16], 1.0, &mut r)];
        let probe = Array::randn(&[2, 4], 1.0, &mut r);
        let report = check_graph(store.values(), FD_STEP, |tape, vars| {
            let p = Bound::with_vars(&store, vars.to_vec())?;
            let mut bank = bank.clone();
            let refs: Vec<&Array> = mels.iter().collect();
            let out = trunk_forward(&cfg, &p, &refs, &mut BnMode::Train(&mut bank), None)?;
            let pr = tape.constant(probe.clone());
            let mut loss = out[0].mul(pr)?.sum_all();
            loss = loss.add(out[1].tanh().sum_all())?;
            Ok(loss)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.skipped_fraction() < 0.2, "{report:?}");
    }
}
