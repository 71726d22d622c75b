//! Episodic meta-training loop.
//!
//! Per episode: support images go through the training augmentation path,
//! queries through the eval path; both are encoded in one batch (support
//! rows first), prototypes come from the support rows, the loss is
//! cross-entropy on the query logits plus `lambda` times the BSR of the
//! stacked feature matrix, and one SGD step is applied per task. After each
//! epoch the state is scored by mean prototype accuracy on the validation
//! episodes and the best-scoring state is retained.

use std::io::Write;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    bsr_grad, bsr_loss, episode_loss_grad, proto_accuracy, total_loss, Distance, FewshotError,
};
use crate::dataset::{preprocess_eval, preprocess_train, DatasetError, ImageStore, ImageTensor};
use crate::encoder::{EncoderError, EncoderState, FeatureMatrix};
use crate::episodes::Episode;
use crate::seeds;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error("divergence: non-finite loss at epoch {epoch}, episode {episode}")]
    Divergence { epoch: usize, episode: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Meta-training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Cap on episodes per epoch; `None` iterates the full training list.
    pub tasks_per_epoch: Option<usize>,
    /// Episodes per parameter update; gradients are summed over the window.
    pub episodes_per_update: usize,
    pub lambda_bsr: f64,
    pub temperature: f64,
    pub distance: Distance,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            epochs: 200,
            tasks_per_epoch: None,
            episodes_per_update: 1,
            lambda_bsr: 1e-3,
            temperature: 1.0,
            distance: Distance::SquaredEuclidean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_bsr < 0.0 || !self.lambda_bsr.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "lambda_bsr must be >= 0, got {}",
                self.lambda_bsr
            )));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.episodes_per_update == 0 {
            return Err(TrainError::InvalidConfig(
                "episodes_per_update must be >= 1".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub mean_train_cls: f64,
    pub mean_train_bsr: f64,
    pub val_accuracy: f64,
}

/// Per-task trace kept in memory for diagnostics and oracle tests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub episode: usize,
    pub loss: f64,
    pub cls: f64,
    pub bsr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Write the per-epoch records as JSON-lines.
pub fn write_log<W: Write>(log: &TrainingLog, mut w: W) -> std::io::Result<()> {
    for record in &log.epochs {
        serde_json::to_writer(&mut w, record)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Load one episode's images: support through the augmentation path with a
/// per-image stream derived from `(seed, epoch, episode, side, image)`,
/// queries through the pure eval path.
fn load_episode_batch(
    store: &ImageStore,
    episode: &Episode,
    augment_support: bool,
    seed: u64,
    epoch: usize,
    episode_idx: usize,
) -> Result<Vec<ImageTensor>, TrainError> {
    let mut batch = Vec::with_capacity(episode.support.len() + episode.query.len());
    for (j, (entry, _)) in episode.support.iter().enumerate() {
        let pixels = store.pixels_for(entry)?;
        let tensor = if augment_support {
            let mut rng = seeds::stream(
                seed,
                &[
                    seeds::domain::AUGMENT,
                    epoch as u64,
                    episode_idx as u64,
                    j as u64,
                ],
            );
            preprocess_train(&pixels, &mut rng)?
        } else {
            preprocess_eval(&pixels)?
        };
        batch.push(tensor);
    }
    for (entry, _) in &episode.query {
        let pixels = store.pixels_for(entry)?;
        batch.push(preprocess_eval(&pixels)?);
    }
    Ok(batch)
}

fn split_features(
    features: &FeatureMatrix,
    n_support: usize,
) -> (FeatureMatrix, FeatureMatrix) {
    let support = features.0.slice(s![..n_support, ..]).to_owned();
    let query = features.0.slice(s![n_support.., ..]).to_owned();
    (FeatureMatrix(support), FeatureMatrix(query))
}

/// Mean prototype accuracy over validation episodes (eval preprocessing, no
/// parameter updates).
pub fn validate(
    state: &EncoderState,
    store: &ImageStore,
    episodes: &[Episode],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ep in episodes {
        let batch = load_episode_batch(store, ep, false, 0, 0, 0)?;
        let features = state.encode(&batch)?;
        let (support, query) = split_features(&features, ep.support.len());
        total += proto_accuracy(
            &support,
            &ep.support_labels(),
            &query,
            &ep.query_labels(),
            ep.spec.n_way,
            config.distance,
            config.temperature,
        )?;
    }
    Ok(total / episodes.len() as f64)
}

/// Run the episodic training loop and return the best-validation state with
/// the full log. `epochs == 0` returns the input state unchanged.
pub fn meta_train(
    encoder: &EncoderState,
    store: &ImageStore,
    train_episodes: &[Episode],
    val_episodes: &[Episode],
    config: &TrainConfig,
) -> Result<(EncoderState, TrainingLog), TrainError> {
    config.validate()?;
    encoder.config.validate()?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((encoder.clone(), log));
    }

    let mut state = encoder.clone();
    let mut best: Option<(f64, EncoderState)> = None;
    let per_epoch = config
        .tasks_per_epoch
        .unwrap_or(train_episodes.len())
        .min(train_episodes.len());

    for epoch in 0..config.epochs {
        let mut sum_loss = 0.0;
        let mut sum_cls = 0.0;
        let mut sum_bsr = 0.0;
        let mut pending: Option<crate::encoder::EncoderParams> = None;
        let mut pending_count = 0usize;

        for (i, episode) in train_episodes.iter().take(per_epoch).enumerate() {
            let n_support = episode.support.len();
            let batch = load_episode_batch(store, episode, true, config.seed, epoch, i)?;
            let (features, cache) = state.encode_with_cache(&batch)?;
            if features.0.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Divergence { epoch, episode: i });
            }
            let (support, query) = split_features(&features, n_support);

            let el = episode_loss_grad(
                &support,
                &episode.support_labels(),
                &query,
                &episode.query_labels(),
                episode.spec.n_way,
                config.distance,
                config.temperature,
            )?;
            let bsr = bsr_loss(&features)?;
            let loss = total_loss(el.cls, bsr, config.lambda_bsr)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, episode: i });
            }

            let mut upstream = Array2::zeros(features.0.raw_dim());
            upstream
                .slice_mut(s![..n_support, ..])
                .assign(&el.d_support);
            upstream.slice_mut(s![n_support.., ..]).assign(&el.d_query);
            if config.lambda_bsr > 0.0 {
                upstream += &(bsr_grad(&features) * config.lambda_bsr);
            }

            let grads = state.backward_from_cache(&cache, &upstream)?;
            match pending.as_mut() {
                None => pending = Some(grads),
                Some(acc) => {
                    for ((_, a), (_, _, g)) in acc
                        .named_slices_mut()
                        .iter_mut()
                        .zip(grads.named_slices().iter())
                    {
                        for (x, y) in a.iter_mut().zip(g.iter()) {
                            *x += *y;
                        }
                    }
                }
            }
            pending_count += 1;
            if pending_count == config.episodes_per_update {
                let grads = pending.take().unwrap();
                state
                    .sgd_step(&grads, config.learning_rate)
                    .map_err(|e| match e {
                        EncoderError::Divergence(_) => TrainError::Divergence { epoch, episode: i },
                        other => TrainError::Encoder(other),
                    })?;
                pending_count = 0;
            }

            sum_loss += loss;
            sum_cls += el.cls;
            sum_bsr += bsr;
            log.steps.push(StepRecord {
                epoch,
                episode: i,
                loss,
                cls: el.cls,
                bsr,
            });
        }
        // A trailing partial window still counts as one update.
        if let Some(grads) = pending.take() {
            state
                .sgd_step(&grads, config.learning_rate)
                .map_err(|e| match e {
                    EncoderError::Divergence(_) => TrainError::Divergence {
                        epoch,
                        episode: per_epoch.saturating_sub(1),
                    },
                    other => TrainError::Encoder(other),
                })?;
        }

        let val_accuracy = validate(&state, store, val_episodes, config)?;
        let denom = per_epoch.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            mean_train_loss: sum_loss / denom,
            mean_train_cls: sum_cls / denom,
            mean_train_bsr: sum_bsr / denom,
            val_accuracy,
        });
        let better = match &best {
            None => true,
            Some((acc, _)) => val_accuracy > *acc,
        };
        if better {
            best = Some((val_accuracy, state.clone()));
        }
    }

    let (_, best_state) = best.expect("epochs >= 1 ran");
    Ok((best_state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use crate::episodes::{sample_episodes, EpisodeSpec};

    fn tiny_setup() -> (tempfile::TempDir, ImageStore, Vec<Episode>, Vec<Episode>) {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_synthetic(
            SyntheticSpec {
                n_classes: 4,
                cases_per_class: 2,
                images_per_case: 4,
                seed: 3,
            },
            dir.path(),
        )
        .unwrap();
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 2,
            q_queries_per_class: 2,
        };
        let train = sample_episodes(&index, spec, 4, 10).unwrap();
        let val = sample_episodes(&index, spec, 2, 11).unwrap();
        (dir, ImageStore::new(index), train, val)
    }

    fn tiny_encoder(seed: u64) -> EncoderState {
        EncoderState::init(
            EncoderConfig {
                patch_size: 64,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2.0,
                input_size: 128,
            },
            seed,
        )
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity_with_empty_log() {
        let (_dir, store, train, val) = tiny_setup();
        let encoder = tiny_encoder(1);
        let config = TrainConfig {
            epochs: 0,
            ..quick_config()
        };
        let (out, log) = meta_train(&encoder, &store, &train, &val, &config).unwrap();
        assert_eq!(out, encoder);
        assert!(log.epochs.is_empty());
        assert!(log.steps.is_empty());
    }

    #[test]
    fn meta_train_is_seed_deterministic() {
        let (_dir, store, train, val) = tiny_setup();
        let encoder = tiny_encoder(1);
        let config = quick_config();
        let (a, log_a) = meta_train(&encoder, &store, &train, &val, &config).unwrap();
        let (b, log_b) = meta_train(&encoder, &store, &train, &val, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);

        let other = TrainConfig {
            seed: 99,
            ..quick_config()
        };
        let (c, _) = meta_train(&encoder, &store, &train, &val, &other).unwrap();
        assert_ne!(a.params, c.params, "different augmentation seeds must diverge");
    }

    #[test]
    fn lambda_changes_the_first_update() {
        let (_dir, store, train, val) = tiny_setup();
        let encoder = tiny_encoder(2);
        let with = TrainConfig {
            epochs: 1,
            tasks_per_epoch: Some(1),
            lambda_bsr: 1e-3,
            ..quick_config()
        };
        let without = TrainConfig {
            lambda_bsr: 0.0,
            ..with.clone()
        };
        let (a, _) = meta_train(&encoder, &store, &train, &val, &with).unwrap();
        let (b, _) = meta_train(&encoder, &store, &train, &val, &without).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn lambda_zero_log_has_zero_bsr_contribution() {
        let (_dir, store, train, val) = tiny_setup();
        let encoder = tiny_encoder(2);
        let config = TrainConfig {
            epochs: 1,
            lambda_bsr: 0.0,
            ..quick_config()
        };
        let (_, log) = meta_train(&encoder, &store, &train, &val, &config).unwrap();
        for step in &log.steps {
            assert_eq!(step.loss, step.cls);
        }
    }

    #[test]
    fn log_is_valid_jsonl_with_expected_keys() {
        let (_dir, store, train, val) = tiny_setup();
        let encoder = tiny_encoder(5);
        let (_, log) = meta_train(&encoder, &store, &train, &val, &quick_config()).unwrap();
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in [
            "epoch",
            "mean_train_loss",
            "mean_train_cls",
            "mean_train_bsr",
            "val_accuracy",
        ] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
    }

    #[test]
    fn divergence_reports_epoch_and_episode() {
        let (_dir, store, train, val) = tiny_setup();
        let mut encoder = tiny_encoder(3);
        // An infinite parameter poisons the very first forward pass.
        encoder.params.patch.w[[0, 0]] = f64::INFINITY;
        let err = meta_train(&encoder, &store, &train, &val, &quick_config()).unwrap_err();
        match err {
            TrainError::Divergence { epoch, episode } => {
                assert_eq!((epoch, episode), (0, 0));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }
}
