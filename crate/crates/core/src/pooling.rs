//! Aggregation heads mapping `D × T` frame features to utterance vectors:
//! temporal average (TAP), self-attentive (SAP) and cross-attentive (CAP).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Array, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Tap,
    Sap,
    #[default]
    Cap,
}

impl PoolingMode {
    /// Whether embeddings depend on the other utterance of a pair.
    pub fn is_pairwise(self) -> bool {
        self == PoolingMode::Cap
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Tap => "tap",
            PoolingMode::Sap => "sap",
            PoolingMode::Cap => "cap",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tap" => Ok(PoolingMode::Tap),
            "sap" => Ok(PoolingMode::Sap),
            "cap" => Ok(PoolingMode::Cap),
            other => Err(Error::Config(format!("unknown pooling mode `{other}` (tap|sap|cap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    /// Meta-projection width H.
    pub hidden: usize,
    pub tau: f64,
    /// Off: attention logits are not divided by `tau`.
    pub temperature: bool,
    /// Off: correlations are taken between raw frame features.
    pub meta_projection: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            mode: PoolingMode::Cap,
            hidden: 128,
            tau: 0.05,
            temperature: true,
            meta_projection: true,
        }
    }
}

impl PoolingConfig {
    pub fn effective_tau(&self) -> f64 {
        if self.temperature {
            self.tau
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("pooling.tau must be positive, got {}", self.tau)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("pooling.hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Adds head parameters (and the shared embedding projection) to `store`.
pub fn build_head<R: Rng + ?Sized>(
    cfg: &PoolingConfig,
    frame_dim: usize,
    embed_dim: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = frame_dim;
    let lin = (1.0 / d as f64).sqrt();
    match cfg.mode {
        PoolingMode::Tap => {}
        PoolingMode::Sap => {
            store.insert("sap.w", Array::randn(&[d, d], lin, rng));
            store.insert("sap.b", Array::zeros(&[d]));
            store.insert("sap.mu", Array::randn(&[d], lin, rng));
        }
        PoolingMode::Cap => {
            if cfg.meta_projection {
                store.insert("cap.phi.w", Array::randn(&[cfg.hidden, d], (2.0 / d as f64).sqrt(), rng));
                store.insert("cap.phi.b", Array::zeros(&[cfg.hidden]));
            }
        }
    }
    store.insert("embed.w", Array::randn(&[embed_dim, d], lin, rng));
    Ok(())
}

fn as_column(v: Var<'_>) -> Result<Var<'_>> {
    let n = v.shape()[0];
    v.reshape(&[n, 1])
}

fn check_frames(frames: Var<'_>) -> Result<(usize, usize)> {
    match frames.shape().as_slice() {
        &[d, t] if t > 0 => Ok((d, t)),
        s => Err(Error::Length(format!("expected D × T frames with T ≥ 1, got {s:?}"))),
    }
}

/// `e = (1/T) Σ_t x_t`.
pub fn tap(frames: Var<'_>) -> Result<Var<'_>> {
    check_frames(frames)?;
    frames.mean(1)
}

/// A pooled vector and the attention weights over frames that produced it.
#[derive(Clone, Copy)]
pub struct Attended<'t> {
    pub e: Var<'t>,
    pub w: Var<'t>,
}

/// `h_t = tanh(W x_t + b)`, `w = softmax(h_tᵀ μ)`, `e = Σ w_t x_t`.
pub fn sap<'t>(frames: Var<'t>, w: Var<'t>, b: Var<'t>, mu: Var<'t>) -> Result<Attended<'t>> {
    let (d, t) = check_frames(frames)?;
    let h = w.matmul(frames)?.add_along(b, 1)?.tanh();
    let scores = mu.reshape(&[1, d])?.matmul(h)?.reshape(&[t])?;
    let weights = scores.softmax(0)?;
    let e = frames.matmul(as_column(weights)?)?.reshape(&[d])?;
    Ok(Attended { e, w: weights })
}

/// Column-wise `max(0, W_φ x_t + b_φ)`.
pub fn meta_project<'t>(frames: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_frames(frames)?;
    Ok(w.matmul(frames)?.add_along(b, 1)?.relu())
}

/// Added to column norms so all-zero (ReLU-dead) columns give 0, not NaN.
pub const COLUMN_EPS: f64 = 1e-12;

/// `h_t / (‖h_t‖ + ε)` for every column. The ε sits outside the root, so
/// scaling a column by c changes the result only by O(ε / c‖h_t‖).
pub fn unit_columns(h: Var<'_>) -> Result<Var<'_>> {
    h.div_along(h.l2norm_floor(0, 0.0)?.add_scalar(COLUMN_EPS), 0)
}

/// `R[i, j] = cos(S_i, Q_j)` from column-normalised hiddens.
pub fn correlation<'t>(s_unit: Var<'t>, q_unit: Var<'t>) -> Result<Var<'t>> {
    s_unit.transpose()?.matmul(q_unit)
}

/// Mean row of `R`: one entry per column.
pub fn pair_context(r: Var<'_>) -> Result<Var<'_>> {
    r.mean(0)
}

/// `softmax_t(R_{t,*} · μ / τ)` over the rows of `R`.
pub fn cap_attention<'t>(r: Var<'t>, mu: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let rows = r.shape()[0];
    r.matmul(as_column(mu)?)?.reshape(&[rows])?.scale(1.0 / tau).softmax(0)
}

/// Residual attention: `(1/T) Σ_t (1 + w_t) x_t`.
pub fn cap_pool<'t>(frames: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let (d, t) = check_frames(frames)?;
    if w.shape() != [t] {
        return Err(Error::Dimension(format!(
            "{t} frames but {:?} attention weights",
            w.shape()
        )));
    }
    let weighted = frames.matmul(as_column(w)?)?.reshape(&[d])?;
    frames.mean(1)?.add(weighted.scale(1.0 / t as f64))
}

/// Per-utterance part of CAP, computed once and reused across pairs.
#[derive(Clone, Copy)]
pub struct CapSide<'t> {
    pub frames: Var<'t>,
    pub unit_hidden: Var<'t>,
}

/// Meta-projects (when enabled) and column-normalises one utterance.
pub fn cap_side<'t>(frames: Var<'t>, p: &Bound<'t>, cfg: &PoolingConfig) -> Result<CapSide<'t>> {
    check_frames(frames)?;
    let hidden = if cfg.meta_projection {
        meta_project(frames, p.get("cap.phi.w")?, p.get("cap.phi.b")?)?
    } else {
        frames
    };
    Ok(CapSide {
        frames,
        unit_hidden: unit_columns(hidden)?,
    })
}

#[derive(Clone, Copy)]
pub struct PooledPair<'t> {
    pub e_s: Var<'t>,
    pub e_q: Var<'t>,
    pub w_s: Var<'t>,
    pub w_q: Var<'t>,
}

/// Cross-attentive pooling of a (support, query) pair. The query side uses
/// `Rᵀ` and so is computed exactly as the support side with roles swapped.
pub fn cap_pair<'t>(s: &CapSide<'t>, q: &CapSide<'t>, tau: f64) -> Result<PooledPair<'t>> {
    let r = correlation(s.unit_hidden, q.unit_hidden)?;
    let w_s = cap_attention(r, pair_context(r)?, tau)?;
    let rq = r.transpose()?;
    let w_q = cap_attention(rq, pair_context(rq)?, tau)?;
    Ok(PooledPair {
        e_s: cap_pool(s.frames, w_s)?,
        e_q: cap_pool(q.frames, w_q)?,
        w_s,
        w_q,
    })
}

/// `x = W e` for one vector.
pub fn embed<'t>(e: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let out = w.shape()[0];
    w.matmul(as_column(e)?)?.reshape(&[out])
}

/// Embeds the columns of `D × n` at once.
pub fn embed_columns<'t>(cols: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    w.matmul(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_graph, Tape, FD_STEP};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn val(v: Var<'_>) -> Array {
        v.value().clone()
    }

    #[test]
    fn tap_examples() {
        let tape = Tape::new();
        // frames (1,2) and (3,4) as columns
        let f = tape.constant(Array::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]));
        assert_eq!(val(tap(f).unwrap()).data(), &[2.0, 3.0]);
        let one = tape.constant(Array::from_rows(&[vec![5.0], vec![-1.0]]));
        assert_eq!(val(tap(one).unwrap()).data(), &[5.0, -1.0]);
    }

    #[test]
    fn sap_examples() {
        let tape = Tape::new();
        let mut r = rng(1);
        let frames = tape.constant(Array::randn(&[4, 6], 1.0, &mut r));
        let w = tape.constant(Array::randn(&[4, 4], 1.0, &mut r));
        let b = tape.constant(Array::randn(&[4], 1.0, &mut r));
        let zero = tape.constant(Array::zeros(&[4]));
        let out = sap(frames, w, b, zero).unwrap();
        assert!(val(out.w).data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        assert!(val(out.e).max_abs_diff(&val(tap(frames).unwrap())) < 1e-12);

        let col = Array::randn(&[4, 1], 1.0, &mut r);
        let same = Array::new(&[4, 5], (0..4).flat_map(|i| vec![col.data()[i]; 5]).collect()).unwrap();
        let mu = tape.constant(Array::randn(&[4], 3.0, &mut r));
        let out = sap(tape.constant(same), w, b, mu).unwrap();
        assert!(val(out.w).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));

        let params = vec![
            Array::randn(&[3, 3], 0.5, &mut r),
            Array::randn(&[3], 0.5, &mut r),
            Array::randn(&[3], 0.5, &mut r),
        ];
        let x = Array::randn(&[3, 5], 1.0, &mut r);
        let probe = Array::randn(&[3], 1.0, &mut r);
        let report = check_graph(&params, FD_STEP, |t, v| {
            let e = sap(t.constant(x.clone()), v[0], v[1], v[2])?.e;
            Ok(e.mul(t.constant(probe.clone()))?.sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn meta_projection_examples() {
        let tape = Tape::new();
        let x = Array::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, 3.0, 0.0]]);
        let eye = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h = meta_project(tape.constant(x.clone()), tape.constant(eye.clone()), tape.constant(Array::zeros(&[2]))).unwrap();
        assert_eq!(val(h), x);

        let dead = meta_project(tape.constant(x.clone()), tape.constant(eye), tape.constant(Array::full(&[2], -100.0))).unwrap();
        assert!(val(dead).data().iter().all(|&v| v == 0.0));
        let u = unit_columns(dead).unwrap();
        let r = correlation(u, u).unwrap();
        let w = cap_attention(r, pair_context(r).unwrap(), 0.05).unwrap();
        let e = cap_pool(tape.constant(x), w).unwrap();
        assert!(val(w).is_finite() && val(e).is_finite());

        let mut g = rng(2);
        let params = vec![Array::randn(&[4, 3], 1.0, &mut g), Array::randn(&[4], 1.0, &mut g)];
        let frames = Array::randn(&[3, 6], 1.0, &mut g);
        let report = check_graph(&params, FD_STEP, |t, v| {
            Ok(meta_project(t.constant(frames.clone()), v[0], v[1])?.tanh().sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn correlation_examples() {
        let tape = Tape::new();
        let s = tape.constant(Array::from_rows(&[vec![1.0], vec![0.0]]));
        let q = tape.constant(Array::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let r = correlation(unit_columns(s).unwrap(), unit_columns(q).unwrap()).unwrap();
        assert!(val(r).max_abs_diff(&Array::from_rows(&[vec![0.0, 1.0]])) < 1e-9);

        let u = tape.constant(Array::from_rows(&[vec![1.0, 0.0, 0.6], vec![0.0, 1.0, 0.8]]));
        let r = val(correlation(u, u).unwrap());
        for i in 0..3 {
            assert!((r.at(&[i, i]) - 1.0).abs() < 1e-12);
        }

        let mut g = rng(3);
        let a = unit_columns(tape.constant(Array::randn(&[5, 4], 1.0, &mut g))).unwrap();
        let b = unit_columns(tape.constant(Array::randn(&[5, 7], 1.0, &mut g))).unwrap();
        let ab = val(correlation(a, b).unwrap());
        let ba = val(correlation(b, a).unwrap());
        assert_eq!(ab.transpose(), ba);
        assert!(ab.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn context_and_attention_examples() {
        let tape = Tape::new();
        let eye = tape.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(val(pair_context(eye).unwrap()).data(), &[0.5, 0.5]);
        let c = tape.constant(Array::full(&[3, 2], 0.3));
        assert!(val(pair_context(c).unwrap()).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let row = Array::from_rows(&[vec![0.1, -0.4, 0.9]]);
        assert_eq!(val(pair_context(tape.constant(row.clone())).unwrap()).data(), row.data());

        let same = tape.constant(Array::from_rows(&[vec![0.2, 0.7], vec![0.2, 0.7], vec![0.2, 0.7]]));
        let mu = tape.constant(Array::from_vec(vec![1.0, 2.0]));
        for tau in [0.05, 1.0, 7.0] {
            let w = val(cap_attention(same, mu, tau).unwrap());
            assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        }

        let r = tape.constant(Array::from_rows(&[vec![1.0], vec![0.0]]));
        let one = tape.constant(Array::from_vec(vec![1.0]));
        let w = val(cap_attention(r, one, 0.05).unwrap());
        let expect = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!((w.data()[1] - expect).abs() < 1e-20);
        assert!((w.data()[1] - 2.06e-9).abs() < 0.01e-9);

        let mut g = rng(4);
        let r = tape.constant(Array::uniform(&[6, 5], -1.0, 1.0, &mut g));
        let w = val(cap_attention(r, pair_context(r).unwrap(), 1e6).unwrap());
        assert!(w.data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-6));
        assert!(matches!(cap_attention(r, pair_context(r).unwrap(), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cap_pool_examples() {
        let tape = Tape::new();
        let f = tape.constant(Array::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]));
        let w = tape.constant(Array::from_vec(vec![0.5, 0.5]));
        assert_eq!(val(cap_pool(f, w).unwrap()).data(), &[1.5, 1.5]);

        let mut g = rng(5);
        let x = Array::randn(&[3, 4], 1.0, &mut g);
        let frames = tape.constant(x.clone());
        let hot = tape.constant(Array::from_vec(vec![0.0, 0.0, 1.0, 0.0]));
        let e = val(cap_pool(frames, hot).unwrap());
        let mean = val(tap(frames).unwrap());
        for d in 0..3 {
            assert!((e.data()[d] - (mean.data()[d] + x.at(&[d, 2]) / 4.0)).abs() < 1e-12);
        }
        let short = tape.constant(Array::from_vec(vec![1.0]));
        assert!(matches!(cap_pool(frames, short), Err(Error::Dimension(_))));
    }

    fn cap_store(d: usize, h: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let cfg = PoolingConfig {
            hidden: h,
            ..Default::default()
        };
        build_head(&cfg, d, d, &mut store, &mut rng(seed)).unwrap();
        store
    }

    #[test]
    fn cap_pair_symmetries() {
        let store = cap_store(4, 5, 6);
        let cfg = PoolingConfig {
            hidden: 5,
            ..Default::default()
        };
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut g = rng(7);
        let a = cap_side(tape.constant(Array::randn(&[4, 6], 1.0, &mut g)), &p, &cfg).unwrap();
        let b = cap_side(tape.constant(Array::randn(&[4, 9], 1.0, &mut g)), &p, &cfg).unwrap();
        let aa = cap_pair(&a, &a, cfg.tau).unwrap();
        assert_eq!(val(aa.e_s), val(aa.e_q));
        let ab = cap_pair(&a, &b, cfg.tau).unwrap();
        let ba = cap_pair(&b, &a, cfg.tau).unwrap();
        assert_eq!(val(ab.e_s), val(ba.e_q));
        assert_eq!(val(ab.w_s), val(ba.w_q));
    }

    #[test]
    fn full_cap_gradient() {
        let mut g = rng(8);
        let params = vec![
            Array::randn(&[5, 4], 1.0, &mut g),
            Array::randn(&[5], 0.5, &mut g),
            Array::randn(&[3, 4], 1.0, &mut g),
            Array::randn(&[4, 6], 1.0, &mut g),
            Array::randn(&[4, 7], 1.0, &mut g),
        ];
        let cfg = PoolingConfig {
            hidden: 5,
            tau: 0.5,
            ..Default::default()
        };
        let report = check_graph(&params, FD_STEP, |_, v| {
            let s = CapSide {
                frames: v[3],
                unit_hidden: unit_columns(meta_project(v[3], v[0], v[1])?)?,
            };
            let q = CapSide {
                frames: v[4],
                unit_hidden: unit_columns(meta_project(v[4], v[0], v[1])?)?,
            };
            let pair = cap_pair(&s, &q, cfg.tau)?;
            let xs = embed(pair.e_s, v[2])?;
            let xq = embed(pair.e_q, v[2])?;
            Ok(xs.mul(xq)?.sum_all().add(pair.w_s.mul(pair.w_s)?.sum_all())?)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn embed_examples() {
        let tape = Tape::new();
        let mut w = Array::zeros(&[5, 3]);
        for i in 0..3 {
            w.set(&[i, i], 1.0);
        }
        let e = Array::from_vec(vec![1.5, -2.0, 0.25]);
        let x = val(embed(tape.constant(e.clone()), tape.constant(w)).unwrap());
        assert_eq!(&x.data()[..3], e.data());
        assert_eq!(&x.data()[3..], &[0.0, 0.0]);

        let mut g = rng(9);
        let w = tape.constant(Array::randn(&[4, 3], 1.0, &mut g));
        let (a, b) = (Array::randn(&[3], 1.0, &mut g), Array::randn(&[3], 1.0, &mut g));
        let sum = val(embed(tape.constant(a.zip_map(&b, |x, y| x + y)), w).unwrap());
        let parts = val(embed(tape.constant(a), w).unwrap()).zip_map(&val(embed(tape.constant(b), w).unwrap()), |x, y| x + y);
        assert!(sum.max_abs_diff(&parts) < 1e-12);

        let params = vec![Array::randn(&[4, 3], 1.0, &mut g), Array::randn(&[3], 1.0, &mut g)];
        let report = check_graph(&params, FD_STEP, |_, v| Ok(embed(v[1], v[0])?.tanh().sum_all())).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn parse_modes() {
        assert_eq!("CAP".parse::<PoolingMode>().unwrap(), PoolingMode::Cap);
        assert!("vlad".parse::<PoolingMode>().is_err());
        assert_eq!(PoolingMode::Sap.to_string(), "sap");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cap_weights_simplex_and_scale_free(seed in 0u64..10_000, ts in 1usize..9, tq in 1usize..9, c in 0.01f64..100.0) {
            let mut g = rng(seed);
            let tape = Tape::new();
            let s = Array::randn(&[6, ts], 1.0, &mut g).map(f64::abs);
            let q = Array::randn(&[6, tq], 1.0, &mut g).map(f64::abs);
            let weights = |scale: f64| {
                let su = unit_columns(tape.constant(s.map(|v| v * scale))).unwrap();
                let qu = unit_columns(tape.constant(q.map(|v| v * scale))).unwrap();
                let r = correlation(su, qu).unwrap();
                let rq = r.transpose().unwrap();
                (
                    val(cap_attention(r, pair_context(r).unwrap(), 0.05).unwrap()),
                    val(cap_attention(rq, pair_context(rq).unwrap(), 0.05).unwrap()),
                    val(r),
                )
            };
            let (ws, wq, r) = weights(1.0);
            for w in [&ws, &wq] {
                prop_assert!(w.data().iter().all(|&x| x >= 0.0));
                prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            }
            let (ws2, wq2, r2) = weights(c);
            prop_assert!(r.max_abs_diff(&r2) < 1e-9);
            prop_assert!(ws.max_abs_diff(&ws2) < 1e-9);
            prop_assert!(wq.max_abs_diff(&wq2) < 1e-9);
        }

        #[test]
        fn residual_term_bound(seed in 0u64..10_000, t in 1usize..12) {
            let mut g = rng(seed);
            let tape = Tape::new();
            let x = Array::randn(&[4, t], 2.0, &mut g);
            let logits = Array::randn(&[t], 3.0, &mut g);
            let frames = tape.constant(x.clone());
            let w = tape.constant(logits).softmax(0).unwrap();
            let diff = val(cap_pool(frames, w).unwrap()).zip_map(&val(tap(frames).unwrap()), |a, b| a - b);
            let norm = diff.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let max_frame = (0..t)
                .map(|j| (0..4).map(|d| x.at(&[d, j]).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            prop_assert!(norm <= max_frame / t as f64 + 1e-12);
        }

        #[test]
        fn tap_and_sap_under_time_permutation(seed in 0u64..10_000, t in 2usize..9) {
            let mut g = rng(seed);
            let tape = Tape::new();
            let x = Array::randn(&[3, t], 1.0, &mut g);
            let mut perm: Vec<usize> = (0..t).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut g);
            let mut xp = x.clone();
            for d in 0..3 {
                for (j, &src) in perm.iter().enumerate() {
                    xp.set(&[d, j], x.at(&[d, src]));
                }
            }
            let (a, b) = (tape.constant(x), tape.constant(xp));
            prop_assert!(val(tap(a).unwrap()).max_abs_diff(&val(tap(b).unwrap())) < 1e-12);
            let w = tape.constant(Array::randn(&[3, 3], 1.0, &mut g));
            let bias = tape.constant(Array::randn(&[3], 1.0, &mut g));
            let mu = tape.constant(Array::randn(&[3], 1.0, &mut g));
            let wa = val(sap(a, w, bias, mu).unwrap().w);
            let wb = val(sap(b, w, bias, mu).unwrap().w);
            for (j, &src) in perm.iter().enumerate() {
                prop_assert!((wb.data()[j] - wa.data()[src]).abs() < 1e-12);
            }
        }

        #[test]
        fn heads_finite_on_zero_frames(t in 1usize..6) {
            let tape = Tape::new();
            let z = tape.constant(Array::zeros(&[4, t]));
            let store = cap_store(4, 3, 11);
            let p = store.bind(&tape, false);
            let cfg = PoolingConfig { hidden: 3, ..Default::default() };
            let side = cap_side(z, &p, &cfg).unwrap();
            let pair = cap_pair(&side, &side, cfg.tau).unwrap();
            prop_assert!(val(pair.e_s).is_finite() && val(pair.w_q).is_finite());
            prop_assert!(val(tap(z).unwrap()).is_finite());
            let w = tape.constant(Array::ones(&[4, 4]));
            let b = tape.constant(Array::zeros(&[4]));
            prop_assert!(val(sap(z, w, b, b).unwrap().e).is_finite());
        }
    }
}
