//! Normalised prototypical loss, global softmax classification and the
//! CAP pair bookkeeping between them.
//!
//! Embeddings are rows: a batch of `n` vectors is an `n × E` array.

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Standard deviation of the initial class-weight rows.
pub const CLASS_WEIGHT_STD: f64 = 0.01;

/// Prototype norms are floored here, so all-zero prototypes give distance 0.
pub const NORM_FLOOR: f64 = 1e-12;

/// `d(x, P) = xᵀP / ‖P‖` for single vectors.
pub fn np_distance<'t>(x: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    if x.shape() != p.shape() || x.shape().len() != 1 {
        return Err(Error::Dimension(format!(
            "np_distance of {:?} and {:?}",
            x.shape(),
            p.shape()
        )));
    }
    Ok(x.mul(p.div_along(p.l2norm_floor(0, NORM_FLOOR)?, 0)?)?.sum_all())
}

/// Rows scaled to unit L2 norm.
pub fn unit_rows(x: Var<'_>) -> Result<Var<'_>> {
    x.div_along(x.l2norm_floor(1, NORM_FLOOR)?, 1)
}

/// `D[i, j] = d(x_i, p_j)` for every query row against every prototype row.
pub fn distance_matrix<'t>(queries: Var<'t>, protos: Var<'t>) -> Result<Var<'t>> {
    queries.matmul(unit_rows(protos)?.transpose()?)
}

/// `d(x_i, p_i)` for matching rows.
pub fn paired_distances<'t>(queries: Var<'t>, protos: Var<'t>) -> Result<Var<'t>> {
    queries.mul(unit_rows(protos)?)?.sum(1)
}

/// Mean negative log-softmax of each row's labelled entry.
pub fn softmax_cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "{} labels for logits {:?}",
            labels.len(),
            shape
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Contract(format!(
            "label {bad} has no distance among {} classes",
            shape[1]
        )));
    }
    Ok(logits.log_softmax(1)?.pick(labels)?.mean_all().neg())
}

/// Prototypical loss over a `Q × N` table of query-to-class distances.
pub fn np_loss_from_distances<'t>(dist: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    softmax_cross_entropy(dist, labels)
}

/// Prototypical loss with one prototype row per class.
pub fn np_loss<'t>(queries: Var<'t>, protos: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    np_loss_from_distances(distance_matrix(queries, protos)?, labels)
}

/// Cross-entropy over all training classes, scored with the same distance
/// against the class-weight rows `C × E`.
pub fn global_softmax_loss<'t>(embeddings: Var<'t>, class_w: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    softmax_cross_entropy(distance_matrix(embeddings, class_w)?, labels)
}

/// `L = L_NP + L_s`.
pub fn combined_loss<'t>(np: Var<'t>, gc: Var<'t>) -> Result<Var<'t>> {
    np.add(gc)
}

/// Which (query, class) pairs CAP must pool for one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPlan {
    pub n_classes: usize,
    /// `(query index, class)`, query-major: pair `q * N + y`.
    pub pairs: Vec<(usize, usize)>,
    /// Indices into `pairs` whose class is the query's own.
    pub positives: Vec<usize>,
}

impl PairPlan {
    /// Both sides of every positive pair feed global classification.
    pub fn gc_count(&self) -> usize {
        2 * self.positives.len()
    }
}

/// Full cross-pairing of every query with every class prototype.
pub fn cap_pair_plan(n_classes: usize, query_labels: &[usize]) -> Result<PairPlan> {
    if n_classes < 2 {
        return Err(Error::Contract(format!(
            "prototypical loss needs at least 2 classes, got {n_classes}"
        )));
    }
    if let Some(&bad) = query_labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("query label {bad} ≥ {n_classes}")));
    }
    let mut pairs = Vec::with_capacity(query_labels.len() * n_classes);
    let mut positives = Vec::with_capacity(query_labels.len());
    for (q, &label) in query_labels.iter().enumerate() {
        for y in 0..n_classes {
            if y == label {
                positives.push(pairs.len());
            }
            pairs.push((q, y));
        }
    }
    Ok(PairPlan {
        n_classes,
        pairs,
        positives,
    })
}
