use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the largest error.
    pub worst: Option<(usize, usize)>,
    /// Largest error per parameter.
    pub per_param: Vec<f64>,
    pub checked: usize,
    /// Elements whose ±h probes fell on different pieces of a piecewise
    /// function (ReLU or max-pool branch changed), where the central
    /// difference does not estimate the derivative.
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

/// Compares `analytic` against `(f(p+h) - f(p-h)) / 2h` element by element.
///
/// `f` returns the loss together with the branch signature of the
/// evaluation (see [`Tape::branch_signature`]); a probe pair whose signatures
/// differ from the unperturbed one is counted in `skipped_kinks` instead of
/// being compared. Smooth functions can return a constant signature.
pub fn finite_diff_check<F>(mut f: F, params: &[Array], analytic: &[Array], h: f64) -> GradCheck
where
    F: FnMut(&[Array]) -> (f64, u64),
{
    assert_eq!(params.len(), analytic.len());
    let (_, base_sig) = f(params);
    let mut work: Vec<Array> = params.to_vec();
    let mut report = GradCheck {
        per_param: vec![0.0; params.len()],
        ..Default::default()
    };
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape(), "gradient shape for param {pi}");
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let (up, sig_up) = f(&work);
            work[pi].data_mut()[ei] = orig - h;
            let (down, sig_down) = f(&work);
            work[pi].data_mut()[ei] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad.data()[ei], numeric);
            report.checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((pi, ei));
                }
            }
        }
    }
    report
}

/// Builds `graph` once on a tape to get analytic gradients for `params`,
/// then checks them by re-running it on fresh tapes.
pub fn check_graph<G>(params: &[Array], h: f64, graph: G) -> Result<GradCheck>
where
    G: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = graph(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v)).collect::<Vec<_>>()
    };
    let mut failure = None;
    let report = finite_diff_check(
        |p| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = p.iter().map(|a| tape.param(a.clone())).collect();
            match graph(&tape, &vars) {
                Ok(loss) => (loss.item(), tape.branch_signature()),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, 0)
                }
            }
        },
        params,
        &analytic,
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
