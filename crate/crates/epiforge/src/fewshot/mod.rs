//! Meta-training core: prototype classifier, cross-entropy, batch spectral
//! regularization, and their exact feature-space gradients.
//!
//! The BSR loss is the sum of squared singular values of the batch feature
//! matrix, computed through an SVD. Mathematically this equals the squared
//! Frobenius norm, which is kept as an independent oracle in the tests and
//! gives the closed-form gradient 2F.

mod train;

pub use train::{meta_train, write_log, EpochRecord, StepRecord, TrainConfig, TrainError, TrainingLog};

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::FeatureMatrix;

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("label {label} out of range for {n_way}-way episode")]
    LabelOutOfRange { label: usize, n_way: usize },
    #[error("class {0} has no support examples")]
    EmptyClass(usize),
    #[error("dimension mismatch: prototypes are {protos}-d, queries are {queries}-d")]
    DimensionMismatch { protos: usize, queries: usize },
    #[error("labels length {labels} does not match {rows} feature rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("zero-norm feature row {0}: cosine distance is undefined (degenerate feature)")]
    ZeroNorm(usize),
    #[error("non-finite value in feature matrix")]
    NonFinite,
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("lambda must be >= 0, got {0}")]
    BadLambda(f64),
}

/// Distance used by the prototype classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Cosine,
}

impl std::str::FromStr for Distance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-euclidean" | "sqeuclidean" => Ok(Distance::SquaredEuclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(format!(
                "unknown distance {other:?}; expected squared-euclidean or cosine"
            )),
        }
    }
}

/// Per-class mean embeddings, row n for episode-local label n.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub protos: Array2<f64>,
}

/// Row n is the arithmetic mean of the support rows labeled n.
pub fn prototypes(
    features: &FeatureMatrix,
    labels: &[usize],
    n_way: usize,
) -> Result<PrototypeSet, FewshotError> {
    if labels.len() != features.batch() {
        return Err(FewshotError::LengthMismatch {
            labels: labels.len(),
            rows: features.batch(),
        });
    }
    let d = features.dim();
    let mut protos = Array2::zeros((n_way, d));
    let mut counts = vec![0usize; n_way];
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_way {
            return Err(FewshotError::LabelOutOfRange { label, n_way });
        }
        counts[label] += 1;
        let mut p = protos.row_mut(label);
        p += &features.0.row(row);
    }
    for (n, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(FewshotError::EmptyClass(n));
        }
        let mut p = protos.row_mut(n);
        p /= count as f64;
    }
    Ok(PrototypeSet { protos })
}

/// Distribute prototype gradients back onto support rows: each support row
/// of class n receives `dprotos[n] / count(n)`.
pub fn prototypes_backward(
    dprotos: &Array2<f64>,
    labels: &[usize],
    n_rows: usize,
) -> Array2<f64> {
    let n_way = dprotos.nrows();
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        counts[l] += 1;
    }
    let mut out = Array2::zeros((n_rows, dprotos.ncols()));
    for (row, &label) in labels.iter().enumerate() {
        let g = dprotos.row(label).mapv(|v| v / counts[label] as f64);
        out.row_mut(row).assign(&g);
    }
    out
}

/// Prototype classifier logits.
///
/// Squared-euclidean mode: `logit(q, n) = -||x_q - p_n||^2 / tau`;
/// cosine mode: `logit(q, n) = cos(x_q, p_n) / tau`. Argmax is the
/// predicted class.
pub fn proto_logits(
    protos: &PrototypeSet,
    queries: &FeatureMatrix,
    distance: Distance,
    tau: f64,
) -> Result<Array2<f64>, FewshotError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(FewshotError::BadTemperature(tau));
    }
    if protos.protos.ncols() != queries.dim() {
        return Err(FewshotError::DimensionMismatch {
            protos: protos.protos.ncols(),
            queries: queries.dim(),
        });
    }
    let n_way = protos.protos.nrows();
    let bq = queries.batch();
    let mut logits = Array2::zeros((bq, n_way));
    match distance {
        Distance::SquaredEuclidean => {
            for q in 0..bq {
                for n in 0..n_way {
                    let mut dist = 0.0;
                    for c in 0..queries.dim() {
                        let diff = queries.0[[q, c]] - protos.protos[[n, c]];
                        dist += diff * diff;
                    }
                    logits[[q, n]] = -dist / tau;
                }
            }
        }
        Distance::Cosine => {
            let qnorms: Vec<f64> = (0..bq)
                .map(|q| queries.0.row(q).dot(&queries.0.row(q)).sqrt())
                .collect();
            let pnorms: Vec<f64> = (0..n_way)
                .map(|n| protos.protos.row(n).dot(&protos.protos.row(n)).sqrt())
                .collect();
            if let Some(q) = qnorms.iter().position(|v| *v == 0.0) {
                return Err(FewshotError::ZeroNorm(q));
            }
            if let Some(n) = pnorms.iter().position(|v| *v == 0.0) {
                return Err(FewshotError::ZeroNorm(n));
            }
            for q in 0..bq {
                for n in 0..n_way {
                    let dot = queries.0.row(q).dot(&protos.protos.row(n));
                    logits[[q, n]] = dot / (qnorms[q] * pnorms[n] * tau);
                }
            }
        }
    }
    Ok(logits)
}

/// Gradients of a scalar loss through [`proto_logits`]: given dL/dlogits,
/// returns (dL/dqueries, dL/dprotos).
pub fn proto_logits_backward(
    protos: &PrototypeSet,
    queries: &FeatureMatrix,
    distance: Distance,
    tau: f64,
    dlogits: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), FewshotError> {
    let n_way = protos.protos.nrows();
    let bq = queries.batch();
    let d = queries.dim();
    let mut dq = Array2::zeros((bq, d));
    let mut dp = Array2::zeros((n_way, d));
    match distance {
        Distance::SquaredEuclidean => {
            for q in 0..bq {
                for n in 0..n_way {
                    let g = dlogits[[q, n]];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let diff = queries.0[[q, c]] - protos.protos[[n, c]];
                        dq[[q, c]] += g * (-2.0 * diff / tau);
                        dp[[n, c]] += g * (2.0 * diff / tau);
                    }
                }
            }
        }
        Distance::Cosine => {
            for q in 0..bq {
                let xq = queries.0.row(q);
                let a = xq.dot(&xq).sqrt();
                if a == 0.0 {
                    return Err(FewshotError::ZeroNorm(q));
                }
                for n in 0..n_way {
                    let pn = protos.protos.row(n);
                    let b = pn.dot(&pn).sqrt();
                    if b == 0.0 {
                        return Err(FewshotError::ZeroNorm(n));
                    }
                    let g = dlogits[[q, n]];
                    if g == 0.0 {
                        continue;
                    }
                    let dot = xq.dot(&pn);
                    for c in 0..d {
                        dq[[q, c]] +=
                            g * (pn[c] / (a * b) - dot * xq[c] / (a * a * a * b)) / tau;
                        dp[[n, c]] +=
                            g * (xq[c] / (a * b) - dot * pn[c] / (a * b * b * b)) / tau;
                    }
                }
            }
        }
    }
    Ok((dq, dp))
}

/// Mean cross-entropy with max-subtraction stabilization.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64, FewshotError> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and its gradient w.r.t. the logits:
/// `(softmax - onehot) / n_rows`.
pub fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), FewshotError> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(FewshotError::LengthMismatch {
            labels: labels.len(),
            rows: n,
        });
    }
    let classes = logits.ncols();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(FewshotError::LabelOutOfRange {
                label,
                n_way: classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        loss += -(row[label] - max - sum.ln());
        for c in 0..classes {
            let softmax = (row[c] - max).exp() / sum;
            grad[[r, c]] = (softmax - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Batch spectral regularization: the sum of squared singular values of the
/// feature matrix, computed via SVD.
pub fn bsr_loss(features: &FeatureMatrix) -> Result<f64, FewshotError> {
    if features.0.iter().any(|v| !v.is_finite()) {
        return Err(FewshotError::NonFinite);
    }
    let (rows, cols) = features.0.dim();
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let m = DMatrix::from_row_iterator(rows, cols, features.0.iter().cloned());
    let singular = m.singular_values();
    Ok(singular.iter().map(|s| s * s).sum())
}

/// Gradient of [`bsr_loss`]: `2 F` (the Frobenius identity).
pub fn bsr_grad(features: &FeatureMatrix) -> Array2<f64> {
    features.0.mapv(|v| 2.0 * v)
}

/// Total episode loss: `cls + lambda * bsr` (the BSR term is evaluated on
/// the stacked support-and-query feature matrix by the caller).
pub fn total_loss(cls: f64, bsr: f64, lambda: f64) -> Result<f64, FewshotError> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(FewshotError::BadLambda(lambda));
    }
    Ok(cls + lambda * bsr)
}

/// Classification loss of one episode together with its gradients w.r.t.
/// the support and query feature rows. The support gradient flows through
/// the prototype means.
pub struct EpisodeLoss {
    pub cls: f64,
    pub d_support: Array2<f64>,
    pub d_query: Array2<f64>,
}

pub fn episode_loss_grad(
    support: &FeatureMatrix,
    support_labels: &[usize],
    query: &FeatureMatrix,
    query_labels: &[usize],
    n_way: usize,
    distance: Distance,
    tau: f64,
) -> Result<EpisodeLoss, FewshotError> {
    let protos = prototypes(support, support_labels, n_way)?;
    let logits = proto_logits(&protos, query, distance, tau)?;
    let (cls, dlogits) = cross_entropy_with_grad(&logits, query_labels)?;
    let (d_query, dprotos) = proto_logits_backward(&protos, query, distance, tau, &dlogits)?;
    let d_support = prototypes_backward(&dprotos, support_labels, support.batch());
    Ok(EpisodeLoss {
        cls,
        d_support,
        d_query,
    })
}

/// Mean accuracy of prototype classification of `query` against `support`.
pub fn proto_accuracy(
    support: &FeatureMatrix,
    support_labels: &[usize],
    query: &FeatureMatrix,
    query_labels: &[usize],
    n_way: usize,
    distance: Distance,
    tau: f64,
) -> Result<f64, FewshotError> {
    let protos = prototypes(support, support_labels, n_way)?;
    let logits = proto_logits(&protos, query, distance, tau)?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(query_labels)
        .filter(|(row, &label)| {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            argmax == label
        })
        .count();
    Ok(correct as f64 / query_labels.len().max(1) as f64)
}
