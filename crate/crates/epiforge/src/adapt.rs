//! Per-task adaptation (the transfer stage).
//!
//! Two methods share the machinery: PMT attaches a fully connected head
//! (initialized from the class prototypes) and fine-tunes head and encoder
//! jointly with Adam on the support cross-entropy; the PMF baseline keeps the
//! prototype classifier, recomputing prototypes from the support features at
//! every step, and fine-tunes the encoder alone. Adaptation is functional:
//! callers keep their states, adapted copies are returned. The initial
//! learning rate is picked per task by a stratified holdout search over a
//! candidate grid that includes 0 ("no fine-tune").

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderState, FeatureMatrix};
use crate::fewshot::{
    bsr_grad, bsr_loss, cross_entropy_with_grad, episode_loss_grad, prototypes, proto_logits,
    Distance, FewshotError, PrototypeSet,
};
use crate::dataset::ImageTensor;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error("divergence: non-finite loss at fine-tune step {step}")]
    Divergence { step: usize },
    #[error("class {class} has {count} support items; holdout split needs >= 2 per class")]
    SplitInfeasible { class: usize, count: usize },
    #[error("lr candidate list is empty")]
    NoCandidates,
    #[error("negative learning rate {0}")]
    NegativeLr(f64),
    #[error("invalid finetune config: {0}")]
    InvalidConfig(String),
}

/// Fully connected classification head: logits = x . W^T + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// (n_classes, d)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, features: &FeatureMatrix) -> Array2<f64> {
        let mut out = features.0.dot(&self.weight.t());
        out += &self.bias;
        out
    }
}

/// Initialize a head from class prototypes: weight rows are the prototype
/// vectors, bias is zero, so before any fine-tuning the head is a linear
/// proxy of the prototype classifier.
pub fn attach_head(
    support_features: &FeatureMatrix,
    support_labels: &[usize],
    n_classes: usize,
) -> Result<LinearHead, AdaptError> {
    let protos = prototypes(support_features, support_labels, n_classes)?;
    Ok(LinearHead {
        bias: Array1::zeros(n_classes),
        weight: protos.protos,
    })
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub lr_candidates: Vec<f64>,
    pub holdout_fraction: f64,
    /// Weight of a BSR term on the support feature matrix during fine-tuning
    /// (0 disables it).
    pub lambda_bsr: f64,
    pub distance: Distance,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-3,
            steps: 20,
            lr_candidates: vec![1e-2, 1e-3, 1e-4, 0.0],
            holdout_fraction: 0.2,
            lambda_bsr: 0.0,
            distance: Distance::SquaredEuclidean,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(AdaptError::InvalidConfig(format!(
                "holdout_fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.lr_candidates.is_empty() {
            return Err(AdaptError::NoCandidates);
        }
        if let Some(&lr) = self.lr_candidates.iter().find(|lr| **lr < 0.0) {
            return Err(AdaptError::NegativeLr(lr));
        }
        Ok(())
    }
}

/// Adam on the head parameters; the encoder keeps its own moments.
#[derive(Debug, Clone)]
struct HeadAdam {
    t: u64,
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

impl HeadAdam {
    fn new(head: &LinearHead) -> Self {
        HeadAdam {
            t: 0,
            m_w: Array2::zeros(head.weight.raw_dim()),
            v_w: Array2::zeros(head.weight.raw_dim()),
            m_b: Array1::zeros(head.bias.raw_dim()),
            v_b: Array1::zeros(head.bias.raw_dim()),
        }
    }

    fn step(&mut self, head: &mut LinearHead, dw: &Array2<f64>, db: &Array1<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let mut update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        };
        for ((p, m), (v, g)) in head
            .weight
            .iter_mut()
            .zip(self.m_w.iter_mut())
            .zip(self.v_w.iter_mut().zip(dw.iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in head
            .bias
            .iter_mut()
            .zip(self.m_b.iter_mut())
            .zip(self.v_b.iter_mut().zip(db.iter()))
        {
            update(p, m, v, *g);
        }
    }
}

fn tensors_of(items: &[(ImageTensor, usize)]) -> Vec<ImageTensor> {
    items.iter().map(|(t, _)| t.clone()).collect()
}

fn labels_of(items: &[(ImageTensor, usize)]) -> Vec<usize> {
    items.iter().map(|(_, l)| *l).collect()
}

/// Jointly fine-tune head and encoder on the support cross-entropy with Adam
/// for `steps` steps. `lr == 0` or `steps == 0` returns unchanged copies; the
/// caller's originals are never mutated.
pub fn finetune_pmt(
    encoder: &EncoderState,
    head: &LinearHead,
    support: &[(ImageTensor, usize)],
    lr: f64,
    steps: usize,
    lambda_bsr: f64,
) -> Result<(EncoderState, LinearHead), AdaptError> {
    if lr < 0.0 {
        return Err(AdaptError::NegativeLr(lr));
    }
    let mut enc = encoder.clone();
    enc.adam = None; // fresh moments per adaptation
    let mut head = head.clone();
    if lr == 0.0 || steps == 0 {
        return Ok((enc, head));
    }
    let tensors = tensors_of(support);
    let labels = labels_of(support);
    let mut head_adam = HeadAdam::new(&head);
    for step in 0..steps {
        let (features, cache) = enc.encode_with_cache(&tensors)?;
        let logits = head.logits(&features);
        let (mut loss, dlogits) = cross_entropy_with_grad(&logits, &labels)?;
        let mut upstream = dlogits.dot(&head.weight);
        if lambda_bsr > 0.0 {
            loss += lambda_bsr * bsr_loss(&features)?;
            upstream += &(bsr_grad(&features) * lambda_bsr);
        }
        if !loss.is_finite() {
            return Err(AdaptError::Divergence { step });
        }
        let dw = dlogits.t().dot(&features.0);
        let db = dlogits.sum_axis(Axis(0));
        let enc_grads = enc.backward_from_cache(&cache, &upstream)?;
        enc.adam_step(&enc_grads, lr).map_err(|e| match e {
            EncoderError::Divergence(_) => AdaptError::Divergence { step },
            other => AdaptError::Encoder(other),
        })?;
        head_adam.step(&mut head, &dw, &db, lr);
        if head.weight.iter().chain(head.bias.iter()).any(|v| !v.is_finite()) {
            return Err(AdaptError::Divergence { step });
        }
    }
    Ok((enc, head))
}

/// Fine-tune the encoder with the prototype classifier on the support set:
/// prototypes are recomputed from the support features at every step and the
/// support items themselves are scored against them.
pub fn finetune_pmf_proto(
    encoder: &EncoderState,
    support: &[(ImageTensor, usize)],
    n_way: usize,
    lr: f64,
    steps: usize,
    lambda_bsr: f64,
    distance: Distance,
    temperature: f64,
) -> Result<EncoderState, AdaptError> {
    if lr < 0.0 {
        return Err(AdaptError::NegativeLr(lr));
    }
    let mut enc = encoder.clone();
    enc.adam = None;
    if lr == 0.0 || steps == 0 {
        return Ok(enc);
    }
    let tensors = tensors_of(support);
    let labels = labels_of(support);
    for step in 0..steps {
        let (features, cache) = enc.encode_with_cache(&tensors)?;
        // Features act as both the prototype source and the scored queries;
        // the two gradient paths sum.
        let el = episode_loss_grad(
            &features, &labels, &features, &labels, n_way, distance, temperature,
        )?;
        let mut loss = el.cls;
        let mut upstream = el.d_support + el.d_query;
        if lambda_bsr > 0.0 {
            loss += lambda_bsr * bsr_loss(&features)?;
            upstream += &(bsr_grad(&features) * lambda_bsr);
        }
        if !loss.is_finite() {
            return Err(AdaptError::Divergence { step });
        }
        let grads = enc.backward_from_cache(&cache, &upstream)?;
        enc.adam_step(&grads, lr).map_err(|e| match e {
            EncoderError::Divergence(_) => AdaptError::Divergence { step },
            other => AdaptError::Encoder(other),
        })?;
    }
    Ok(enc)
}

/// A task-adapted model ready for query prediction.
#[derive(Debug, Clone)]
pub enum AdaptedModel {
    Pmt {
        encoder: EncoderState,
        head: LinearHead,
    },
    Pmf {
        encoder: EncoderState,
        protos: PrototypeSet,
        distance: Distance,
        temperature: f64,
    },
}

impl AdaptedModel {
    /// Argmax predictions for preprocessed query tensors; deterministic.
    pub fn predict(&self, query: &[ImageTensor]) -> Result<Vec<usize>, AdaptError> {
        let logits = match self {
            AdaptedModel::Pmt { encoder, head } => {
                let features = encoder.encode(query)?;
                head.logits(&features)
            }
            AdaptedModel::Pmf {
                encoder,
                protos,
                distance,
                temperature,
            } => {
                let features = encoder.encode(query)?;
                proto_logits(protos, &features, *distance, *temperature)?
            }
        };
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// An adaptation procedure that `lr_search` can drive: fine-tune a scratch
/// copy on a fit subset, score accuracy on a holdout subset. Generic over
/// the item type so the search contract is testable in feature space.
pub trait Adapter<X> {
    type Model: Clone;
    fn adapt(
        &self,
        base: &Self::Model,
        fit: &[(X, usize)],
        lr: f64,
        steps: usize,
    ) -> Result<Self::Model, AdaptError>;
    fn accuracy(&self, model: &Self::Model, items: &[(X, usize)]) -> Result<f64, AdaptError>;
}

/// PMT adaptation over preprocessed image tensors.
pub struct PmtAdapter {
    pub lambda_bsr: f64,
}

impl Adapter<ImageTensor> for PmtAdapter {
    type Model = (EncoderState, LinearHead);

    fn adapt(
        &self,
        base: &Self::Model,
        fit: &[(ImageTensor, usize)],
        lr: f64,
        steps: usize,
    ) -> Result<Self::Model, AdaptError> {
        finetune_pmt(&base.0, &base.1, fit, lr, steps, self.lambda_bsr)
    }

    fn accuracy(&self, model: &Self::Model, items: &[(ImageTensor, usize)]) -> Result<f64, AdaptError> {
        let features = model.0.encode(&tensors_of(items))?;
        let predictions = argmax_rows(&model.1.logits(&features));
        Ok(fraction_correct(&predictions, &labels_of(items)))
    }
}

/// PMF adaptation over preprocessed image tensors. The adapted model carries
/// the prototypes recomputed from the fit subset.
pub struct PmfAdapter {
    pub n_way: usize,
    pub lambda_bsr: f64,
    pub distance: Distance,
    pub temperature: f64,
}

impl Adapter<ImageTensor> for PmfAdapter {
    type Model = (EncoderState, PrototypeSet);

    fn adapt(
        &self,
        base: &Self::Model,
        fit: &[(ImageTensor, usize)],
        lr: f64,
        steps: usize,
    ) -> Result<Self::Model, AdaptError> {
        let encoder = finetune_pmf_proto(
            &base.0,
            fit,
            self.n_way,
            lr,
            steps,
            self.lambda_bsr,
            self.distance,
            self.temperature,
        )?;
        let features = encoder.encode(&tensors_of(fit))?;
        let protos = prototypes(&features, &labels_of(fit), self.n_way)?;
        Ok((encoder, protos))
    }

    fn accuracy(&self, model: &Self::Model, items: &[(ImageTensor, usize)]) -> Result<f64, AdaptError> {
        let features = model.0.encode(&tensors_of(items))?;
        let logits = proto_logits(&model.1, &features, self.distance, self.temperature)?;
        Ok(fraction_correct(&argmax_rows(&logits), &labels_of(items)))
    }
}

pub fn fraction_correct(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Stratified fit/holdout split of the support items, seeded; each class
/// keeps at least one item on each side.
pub fn holdout_split<X: Clone>(
    support: &[(X, usize)],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<(X, usize)>, Vec<(X, usize)>), AdaptError> {
    let n_classes = support.iter().map(|(_, l)| *l).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (_, l)) in support.iter().enumerate() {
        by_class[*l].push(i);
    }
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(AdaptError::SplitInfeasible {
                class,
                count: members.len(),
            });
        }
        let mut order = members.clone();
        let mut rng = crate::seeds::stream(seed, &[crate::seeds::domain::HOLDOUT, class as u64]);
        order.shuffle(&mut rng);
        let h = ((members.len() as f64 * holdout_fraction).round() as usize)
            .clamp(1, members.len() - 1);
        for &i in &order[..h] {
            holdout.push(support[i].clone());
        }
        for &i in &order[h..] {
            fit.push(support[i].clone());
        }
    }
    Ok((fit, holdout))
}

/// Pick the initial learning rate for a task: split the support into
/// fit/holdout (stratified, seeded), fine-tune a scratch copy per candidate
/// (0 means no fine-tune), and return the candidate with the best holdout
/// accuracy; ties break toward the smaller rate.
pub fn lr_search<A, X>(
    adapter: &A,
    base: &A::Model,
    support: &[(X, usize)],
    config: &FinetuneConfig,
) -> Result<f64, AdaptError>
where
    A: Adapter<X>,
    X: Clone,
{
    config.validate()?;
    let (fit, holdout) = holdout_split(support, config.holdout_fraction, config.seed)?;
    let mut candidates = config.lr_candidates.clone();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None; // (accuracy, lr)
    for &lr in &candidates {
        let model = adapter.adapt(base, &fit, lr, config.steps)?;
        let acc = adapter.accuracy(&model, &holdout)?;
        let better = match best {
            None => true,
            Some((best_acc, _)) => acc > best_acc,
        };
        if better {
            best = Some((acc, lr));
        }
    }
    Ok(best.expect("candidates nonempty").1)
}
