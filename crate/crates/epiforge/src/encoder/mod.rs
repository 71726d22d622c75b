//! Compact trainable image encoder: patch embedding, pre-norm self-attention
//! blocks, mean-pooled token features. Exact reverse-mode gradients, SGD and
//! Adam updates, and a bit-exact checkpoint format.
//!
//! The architecture is the patch-transformer family at desk scale; the
//! checkpoint loader accepts any config, so externally trained weights of
//! the same layout can be dropped in.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{decode_checkpoint, load_weights, save_weights};
pub use forward::ForwardCache;
pub use params::{BlockParams, EncoderParams, LayerNormParams, LinearParams};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImageTensor, TENSOR_SIDE};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input tensor {index} has shape {found}, expected {expected}")]
    BadInputShape {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("upstream gradient has shape {found}, expected {expected}")]
    BadUpstreamShape { found: String, expected: String },
    #[error("gradient tree does not match parameters at {0}")]
    GradientMismatch(String),
    #[error("learning rate must be > 0, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite gradient in {0}; step aborted")]
    Divergence(String),
    #[error("checkpoint io error on {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            input_size: TENSOR_SIDE,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim == 0 || self.depth == 0 {
            return Err(EncoderError::InvalidConfig(
                "embed_dim and depth must be >= 1".into(),
            ));
        }
        if self.mlp_hidden() == 0 {
            return Err(EncoderError::InvalidConfig(
                "mlp_ratio too small: hidden width is 0".into(),
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.input_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Batch of embeddings, one row per input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(pub Array2<f64>);

impl FeatureMatrix {
    pub fn batch(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    /// Vertical stack, first `a` then `b`.
    pub fn stack(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(a.dim(), b.dim());
        let mut out = Array2::zeros((a.batch() + b.batch(), a.dim()));
        out.slice_mut(ndarray::s![..a.batch(), ..]).assign(&a.0);
        out.slice_mut(ndarray::s![a.batch().., ..]).assign(&b.0);
        FeatureMatrix(out)
    }
}

/// Adam first/second moment buffers plus the Adam step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: EncoderParams,
    pub v: EncoderParams,
}

/// Encoder parameters plus optimizer state and the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub adam: Option<AdamState>,
    pub step_count: u64,
}

impl EncoderState {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(EncoderState {
            params: EncoderParams::init(&config, seed),
            config,
            adam: None,
            step_count: 0,
        })
    }

    fn check_batch(&self, batch: &[ImageTensor]) -> Result<(), EncoderError> {
        let side = self.config.input_size;
        for (i, img) in batch.iter().enumerate() {
            if img.data.dim() != (side, side, 3) {
                return Err(EncoderError::BadInputShape {
                    index: i,
                    found: format!("{:?}", img.data.dim()),
                    expected: format!("({side}, {side}, 3)"),
                });
            }
        }
        Ok(())
    }

    /// Embed a batch; row i depends only on image i.
    pub fn encode(&self, batch: &[ImageTensor]) -> Result<FeatureMatrix, EncoderError> {
        Ok(self.encode_with_cache(batch)?.0)
    }

    /// Embed a batch and keep the activation cache for a later backward pass.
    pub fn encode_with_cache(
        &self,
        batch: &[ImageTensor],
    ) -> Result<(FeatureMatrix, ForwardCache), EncoderError> {
        self.check_batch(batch)?;
        let (features, cache) = forward::forward(&self.params, &self.config, batch);
        Ok((FeatureMatrix(features), cache))
    }

    /// Exact gradients of `<features, upstream>` w.r.t. every parameter.
    /// Runs its own forward pass; use [`EncoderState::backward_from_cache`]
    /// when the features were just computed.
    pub fn backward(
        &self,
        batch: &[ImageTensor],
        upstream: &Array2<f64>,
    ) -> Result<EncoderParams, EncoderError> {
        let (_, cache) = self.encode_with_cache(batch)?;
        self.backward_from_cache(&cache, upstream)
    }

    pub fn backward_from_cache(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
    ) -> Result<EncoderParams, EncoderError> {
        if upstream.dim() != (cache.batch, self.config.embed_dim) {
            return Err(EncoderError::BadUpstreamShape {
                found: format!("{:?}", upstream.dim()),
                expected: format!("({}, {})", cache.batch, self.config.embed_dim),
            });
        }
        Ok(forward::backward(&self.params, &self.config, cache, upstream))
    }

    /// Plain SGD: `p <- p - lr * g`. Rejects negative or non-finite learning
    /// rates and non-finite gradients without touching the state; lr = 0 is
    /// the identity on parameters.
    pub fn sgd_step(&mut self, grads: &EncoderParams, lr: f64) -> Result<(), EncoderError> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(EncoderError::BadLearningRate(lr));
        }
        check_finite_grads(grads)?;
        let mut next = self.params.clone();
        apply_elementwise(&mut next, grads, |p, g| *p -= lr * g)?;
        if !next.all_finite() {
            return Err(EncoderError::Divergence("parameters after sgd step".into()));
        }
        self.params = next;
        self.step_count += 1;
        Ok(())
    }

    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 and bias correction.
    /// Moment buffers live in the state and are created on first use.
    pub fn adam_step(&mut self, grads: &EncoderParams, lr: f64) -> Result<(), EncoderError> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if lr < 0.0 || !lr.is_finite() {
            return Err(EncoderError::BadLearningRate(lr));
        }
        check_finite_grads(grads)?;
        let mut adam = self.adam.clone().unwrap_or_else(|| AdamState {
            t: 0,
            m: EncoderParams::zeros(&self.config),
            v: EncoderParams::zeros(&self.config),
        });
        adam.t += 1;
        let bc1 = 1.0 - BETA1.powi(adam.t as i32);
        let bc2 = 1.0 - BETA2.powi(adam.t as i32);

        let mut next = self.params.clone();
        {
            let mut m_slices = adam.m.named_slices_mut();
            let mut v_slices = adam.v.named_slices_mut();
            let mut p_slices = next.named_slices_mut();
            let g_slices = grads.named_slices();
            if g_slices.len() != p_slices.len() {
                return Err(EncoderError::GradientMismatch("tensor count".into()));
            }
            for (((pn, p), (gn, _, g)), ((_, m), (_, v))) in p_slices
                .iter_mut()
                .zip(g_slices.iter())
                .zip(m_slices.iter_mut().zip(v_slices.iter_mut()))
            {
                if pn != gn || p.len() != g.len() {
                    return Err(EncoderError::GradientMismatch(pn.clone()));
                }
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
        if !next.all_finite() {
            return Err(EncoderError::Divergence("parameters after adam step".into()));
        }
        self.params = next;
        self.adam = Some(adam);
        self.step_count += 1;
        Ok(())
    }
}

fn check_finite_grads(grads: &EncoderParams) -> Result<(), EncoderError> {
    for (name, _, s) in grads.named_slices() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Divergence(name));
        }
    }
    Ok(())
}

fn apply_elementwise(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    f: impl Fn(&mut f64, f64),
) -> Result<(), EncoderError> {
    let g_slices = grads.named_slices();
    let mut p_slices = params.named_slices_mut();
    if g_slices.len() != p_slices.len() {
        return Err(EncoderError::GradientMismatch("tensor count".into()));
    }
    for ((pn, p), (gn, _, g)) in p_slices.iter_mut().zip(g_slices.iter()) {
        if pn != gn || p.len() != g.len() {
            return Err(EncoderError::GradientMismatch(pn.clone()));
        }
        for (pv, gv) in p.iter_mut().zip(g.iter()) {
            f(pv, *gv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PixelImage;
    use crate::{dataset, seeds};
    use ndarray::Array2;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            patch_size: 32,
            embed_dim: 16,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            input_size: 128,
        }
    }

    pub(crate) fn test_images(n: usize, seed: u64) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| {
                let mut rng = seeds::stream(seed, &[0xDEAD, i as u64]);
                let mut data = vec![0u8; 160 * 160 * 3];
                use rand::Rng;
                rng.fill(&mut data[..]);
                let img = PixelImage::new(160, 160, data);
                dataset::preprocess_eval(&img).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig::default();
        c.patch_size = 17;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_shape_contract() {
        let state = EncoderState::init(tiny_config(), 0).unwrap();
        let batch = test_images(7, 1);
        let f = state.encode(&batch).unwrap();
        assert_eq!(f.batch(), 7);
        assert_eq!(f.dim(), 16);
    }

    #[test]
    fn encode_is_per_row_pure() {
        let state = EncoderState::init(tiny_config(), 0).unwrap();
        let mut batch = test_images(3, 2);
        batch.push(batch[0].clone());
        let f = state.encode(&batch).unwrap();
        assert_eq!(f.0.row(0), f.0.row(3));

        // Permuting the batch permutes the rows identically.
        let perm: Vec<ImageTensor> = vec![batch[2].clone(), batch[0].clone(), batch[1].clone()];
        let fp = state.encode(&perm).unwrap();
        assert_eq!(fp.0.row(0), f.0.row(2));
        assert_eq!(fp.0.row(1), f.0.row(0));
        assert_eq!(fp.0.row(2), f.0.row(1));
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let state = EncoderState::init(tiny_config(), 0).unwrap();
        let bad = ImageTensor {
            data: ndarray::Array3::zeros((64, 64, 3)),
        };
        assert!(matches!(
            state.encode(&[bad]),
            Err(EncoderError::BadInputShape { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_scaling_is_linear() {
        let state = EncoderState::init(tiny_config(), 3).unwrap();
        let batch = test_images(2, 4);
        let zero = Array2::zeros((2, 16));
        let g0 = state.backward(&batch, &zero).unwrap();
        assert!(g0.named_slices().iter().all(|(_, _, s)| s.iter().all(|v| *v == 0.0)));

        let mut up = Array2::zeros((2, 16));
        up[[0, 3]] = 1.25;
        up[[1, 7]] = -0.5;
        let g1 = state.backward(&batch, &up).unwrap();
        let g2 = state.backward(&batch, &(&up * 2.0)).unwrap();
        for ((_, _, a), (_, _, b)) in g1.named_slices().iter().zip(g2.named_slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sgd_arithmetic_and_identity() {
        let mut state = EncoderState::init(tiny_config(), 0).unwrap();
        state.params.patch.w[[0, 0]] = 1.0;
        let mut grads = EncoderParams::zeros(&state.config);
        grads.patch.w[[0, 0]] = 2.0;
        state.sgd_step(&grads, 5e-5).unwrap();
        assert!((state.params.patch.w[[0, 0]] - 0.9999).abs() < 1e-15);
        assert_eq!(state.step_count, 1);

        // lr = 0 leaves every parameter unchanged.
        let before = state.params.clone();
        state.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(state.params, before);
        assert!(matches!(
            state.sgd_step(&grads, -1.0),
            Err(EncoderError::BadLearningRate(_))
        ));
    }

    #[test]
    fn two_sgd_steps_sum_deltas() {
        let config = tiny_config();
        let mut one = EncoderState::init(config, 9).unwrap();
        let mut two = one.clone();
        let mut grads = EncoderParams::zeros(&config);
        grads.pos[[0, 0]] = 3.0;
        grads.blocks[1].fc1.w[[2, 2]] = -1.5;
        two.sgd_step(&grads, 1e-3).unwrap();
        two.sgd_step(&grads, 1e-3).unwrap();
        one.sgd_step(&grads, 2e-3).unwrap();
        for ((_, _, a), (_, _, b)) in one
            .params
            .named_slices()
            .iter()
            .zip(two.params.named_slices().iter())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut state = EncoderState::init(tiny_config(), 0).unwrap();
        let before = state.clone();
        let mut grads = EncoderParams::zeros(&state.config);
        grads.blocks[0].qkv.w[[1, 1]] = f64::NAN;
        assert!(matches!(
            state.sgd_step(&grads, 1e-3),
            Err(EncoderError::Divergence(name)) if name == "blocks.0.qkv.w"
        ));
        assert_eq!(state, before);
        assert!(matches!(
            state.adam_step(&grads, 1e-3),
            Err(EncoderError::Divergence(_))
        ));
        assert_eq!(state, before);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With constant gradient g: mhat = g, vhat = g^2, so the first update
        // is -lr * g / (|g| + eps): magnitude ~ lr, direction -sign(g).
        let mut state = EncoderState::init(tiny_config(), 0).unwrap();
        let p0 = state.params.patch.w[[0, 0]];
        let p1 = state.params.patch.w[[0, 1]];
        let mut grads = EncoderParams::zeros(&state.config);
        grads.patch.w[[0, 0]] = 3.0;
        grads.patch.w[[0, 1]] = -0.004;
        let lr = 1e-3;
        state.adam_step(&grads, lr).unwrap();
        let expect = |g: f64| -lr * g / (g.abs() + 1e-8);
        assert!((state.params.patch.w[[0, 0]] - (p0 + expect(3.0))).abs() < 1e-15);
        assert!((state.params.patch.w[[0, 1]] - (p1 + expect(-0.004))).abs() < 1e-15);
        assert_eq!(state.adam.as_ref().unwrap().t, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters_fixed() {
        let mut state = EncoderState::init(tiny_config(), 7).unwrap();
        let before = state.params.clone();
        let grads = EncoderParams::zeros(&state.config);
        for _ in 0..5 {
            state.adam_step(&grads, 1e-2).unwrap();
        }
        assert_eq!(state.params, before);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        // Tiny config so the sweep stays fast; the acceptance suite runs the
        // full 2-block dim-16 configuration.
        let config = EncoderConfig {
            patch_size: 64,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            input_size: 128,
        };
        let state = EncoderState::init(config, 5).unwrap();
        let batch = test_images(2, 8);
        let mut rng = seeds::stream(99, &[1]);
        let upstream = Array2::from_shape_fn((2, 8), |_| {
            use rand::Rng;
            rng.gen_range(-1.0..1.0)
        });

        let loss = |s: &EncoderState| -> f64 {
            let f = s.encode(&batch).unwrap();
            (&f.0 * &upstream).sum()
        };
        let analytic = state.backward(&batch, &upstream).unwrap();

        let h = 1e-4;
        let names: Vec<String> = analytic
            .named_slices()
            .iter()
            .map(|(n, _, _)| n.clone())
            .collect();
        let mut worst: f64 = 0.0;
        for (ti, name) in names.iter().enumerate() {
            let len = analytic.named_slices()[ti].2.len();
            // Up to 6 coordinates per tensor, deterministically spread.
            let step = (len / 6).max(1);
            for ci in (0..len).step_by(step).take(6) {
                let mut plus = state.clone();
                plus.params.named_slices_mut()[ti].1[ci] += h;
                let mut minus = state.clone();
                minus.params.named_slices_mut()[ti].1[ci] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = analytic.named_slices()[ti].2[ci];
                let rel = (an - fd).abs() / (an.abs() + fd.abs() + 1e-8);
                assert!(
                    rel < 1e-3,
                    "{name}[{ci}]: analytic {an} vs fd {fd} (rel {rel})"
                );
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn adam_first_step_is_gradient_scale_invariant() {
        let config = tiny_config();
        let mut a = EncoderState::init(config, 1).unwrap();
        let mut b = a.clone();
        let mut g1 = EncoderParams::zeros(&config);
        g1.patch.w[[0, 0]] = 0.7;
        g1.pos[[1, 1]] = -2.0;
        let mut g10 = EncoderParams::zeros(&config);
        g10.patch.w[[0, 0]] = 7.0;
        g10.pos[[1, 1]] = -20.0;
        a.adam_step(&g1, 1e-3).unwrap();
        b.adam_step(&g10, 1e-3).unwrap();
        assert!((a.params.patch.w[[0, 0]] - b.params.patch.w[[0, 0]]).abs() < 1e-9);
        assert!((a.params.pos[[1, 1]] - b.params.pos[[1, 1]]).abs() < 1e-9);
    }
}
