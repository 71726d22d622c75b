//! Parameter storage for the encoder.
//!
//! Parameters are held in a structured tree mirroring the architecture, with
//! flat named views for the optimizers and the checkpoint format. Gradients
//! reuse the same tree type.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// (in, out); applied as `y = x . w + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch: LinearParams,
    /// Learned positional embedding, (tokens, embed_dim).
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
}

fn linear_zeros(inp: usize, out: usize) -> LinearParams {
    LinearParams {
        w: Array2::zeros((inp, out)),
        b: Array1::zeros(out),
    }
}

fn ln_identity(dim: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: Array1::ones(dim),
        beta: Array1::zeros(dim),
    }
}

/// Truncated normal: N(0, sigma) resampled until within 2 sigma.
fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        // Box-Muller from two uniform draws.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let v = z * sigma;
        if v.abs() <= 2.0 * sigma {
            return v;
        }
    }
}

fn fill_trunc_normal(a: &mut Array2<f64>, rng: &mut ChaCha8Rng, sigma: f64) {
    for v in a.iter_mut() {
        *v = trunc_normal(rng, sigma);
    }
}

impl EncoderParams {
    /// Seeded initialization: truncated-normal (sigma 0.02) weights and
    /// positional embeddings, zero biases, identity layer norms.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        const SIGMA: f64 = 0.02;
        let mut rng = seeds::stream(seed, &[seeds::domain::INIT]);
        let mut params = Self::identity_norms(config);
        fill_trunc_normal(&mut params.patch.w, &mut rng, SIGMA);
        fill_trunc_normal(&mut params.pos, &mut rng, SIGMA);
        for block in &mut params.blocks {
            fill_trunc_normal(&mut block.qkv.w, &mut rng, SIGMA);
            fill_trunc_normal(&mut block.proj.w, &mut rng, SIGMA);
            fill_trunc_normal(&mut block.fc1.w, &mut rng, SIGMA);
            fill_trunc_normal(&mut block.fc2.w, &mut rng, SIGMA);
        }
        params
    }

    /// All-zero tree with the shapes implied by `config`; the gradient
    /// accumulator and the Adam moment buffers start here.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut p = Self::identity_norms(config);
        for block in &mut p.blocks {
            block.ln1.gamma.fill(0.0);
            block.ln2.gamma.fill(0.0);
        }
        p.final_ln.gamma.fill(0.0);
        p
    }

    /// Zero tree except layer-norm gammas at 1.
    fn identity_norms(config: &EncoderConfig) -> Self {
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1: ln_identity(d),
                qkv: linear_zeros(d, 3 * d),
                proj: linear_zeros(d, d),
                ln2: ln_identity(d),
                fc1: linear_zeros(d, hidden),
                fc2: linear_zeros(hidden, d),
            })
            .collect::<Vec<_>>();
        EncoderParams {
            patch: linear_zeros(config.patch_dim(), d),
            pos: Array2::zeros((config.tokens(), d)),
            blocks,
            final_ln: ln_identity(d),
        }
    }

    /// Named tensors in fixed registry order: (name, dims, values).
    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn push2<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: String,
            a: &'a Array2<f64>,
        ) {
            out.push((name, a.shape().to_vec(), a.as_slice().unwrap()));
        }
        fn push1<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: String,
            a: &'a Array1<f64>,
        ) {
            out.push((name, a.shape().to_vec(), a.as_slice().unwrap()));
        }
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        push2(&mut out, "patch.w".into(), &self.patch.w);
        push1(&mut out, "patch.b".into(), &self.patch.b);
        push2(&mut out, "pos".into(), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            push1(&mut out, format!("blocks.{i}.ln1.gamma"), &b.ln1.gamma);
            push1(&mut out, format!("blocks.{i}.ln1.beta"), &b.ln1.beta);
            push2(&mut out, format!("blocks.{i}.qkv.w"), &b.qkv.w);
            push1(&mut out, format!("blocks.{i}.qkv.b"), &b.qkv.b);
            push2(&mut out, format!("blocks.{i}.proj.w"), &b.proj.w);
            push1(&mut out, format!("blocks.{i}.proj.b"), &b.proj.b);
            push1(&mut out, format!("blocks.{i}.ln2.gamma"), &b.ln2.gamma);
            push1(&mut out, format!("blocks.{i}.ln2.beta"), &b.ln2.beta);
            push2(&mut out, format!("blocks.{i}.fc1.w"), &b.fc1.w);
            push1(&mut out, format!("blocks.{i}.fc1.b"), &b.fc1.b);
            push2(&mut out, format!("blocks.{i}.fc2.w"), &b.fc2.w);
            push1(&mut out, format!("blocks.{i}.fc2.b"), &b.fc2.b);
        }
        push1(&mut out, "final_ln.gamma".into(), &self.final_ln.gamma);
        push1(&mut out, "final_ln.beta".into(), &self.final_ln.beta);
        out
    }

    /// Mutable variant of [`EncoderParams::named_slices`], same order.
    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("patch.w".into(), self.patch.w.as_slice_mut().unwrap()));
        out.push(("patch.b".into(), self.patch.b.as_slice_mut().unwrap()));
        out.push(("pos".into(), self.pos.as_slice_mut().unwrap()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((
                format!("blocks.{i}.ln1.gamma"),
                b.ln1.gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("blocks.{i}.ln1.beta"),
                b.ln1.beta.as_slice_mut().unwrap(),
            ));
            out.push((format!("blocks.{i}.qkv.w"), b.qkv.w.as_slice_mut().unwrap()));
            out.push((format!("blocks.{i}.qkv.b"), b.qkv.b.as_slice_mut().unwrap()));
            out.push((
                format!("blocks.{i}.proj.w"),
                b.proj.w.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("blocks.{i}.proj.b"),
                b.proj.b.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("blocks.{i}.ln2.gamma"),
                b.ln2.gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("blocks.{i}.ln2.beta"),
                b.ln2.beta.as_slice_mut().unwrap(),
            ));
            out.push((format!("blocks.{i}.fc1.w"), b.fc1.w.as_slice_mut().unwrap()));
            out.push((format!("blocks.{i}.fc1.b"), b.fc1.b.as_slice_mut().unwrap()));
            out.push((format!("blocks.{i}.fc2.w"), b.fc2.w.as_slice_mut().unwrap()));
            out.push((format!("blocks.{i}.fc2.b"), b.fc2.b.as_slice_mut().unwrap()));
        }
        out.push((
            "final_ln.gamma".into(),
            self.final_ln.gamma.as_slice_mut().unwrap(),
        ));
        out.push((
            "final_ln.beta".into(),
            self.final_ln.beta.as_slice_mut().unwrap(),
        ));
        out
    }

    pub fn n_values(&self) -> usize {
        self.named_slices().iter().map(|(_, _, s)| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_slices()
            .iter()
            .all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            patch_size: 32,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            input_size: 128,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = tiny_config();
        let a = EncoderParams::init(&c, 5);
        let b = EncoderParams::init(&c, 5);
        assert_eq!(a, b);
        let c2 = EncoderParams::init(&c, 6);
        assert_ne!(a, c2);
    }

    #[test]
    fn init_weights_are_trunc_normal_bounded() {
        let p = EncoderParams::init(&tiny_config(), 3);
        assert!(p.patch.w.iter().all(|v| v.abs() <= 0.04));
        assert!(p.blocks[0].qkv.w.iter().all(|v| v.abs() <= 0.04));
        assert!(p.patch.b.iter().all(|v| *v == 0.0));
        assert!(p.blocks[0].ln1.gamma.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn named_slices_orders_match() {
        let mut p = EncoderParams::init(&tiny_config(), 1);
        let names: Vec<String> = p.named_slices().iter().map(|(n, _, _)| n.clone()).collect();
        let names_mut: Vec<String> = p.named_slices_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"blocks.1.fc2.w".to_string()));
    }
}
