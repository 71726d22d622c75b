//! Forward pass with activation caches and the matching exact backward pass.
//!
//! Tokens for the whole batch are stored as one `(batch * tokens, dim)`
//! matrix; attention operates per image and head on row slices. All
//! arithmetic is 64-bit.

use ndarray::{s, Array2, Axis};

use super::params::{BlockParams, EncoderParams, LayerNormParams, LinearParams};
use super::EncoderConfig;
use crate::dataset::ImageTensor;

const LN_EPS: f64 = 1e-6;

/// Flatten each image into row-major patch vectors: token index runs over the
/// patch grid row-major; within a patch, (y, x, channel) row-major.
pub fn extract_patches(batch: &[ImageTensor], config: &EncoderConfig) -> Array2<f64> {
    let p = config.patch_size;
    let grid = config.input_size / p;
    let t = grid * grid;
    let pdim = config.patch_dim();
    let mut out = Array2::zeros((batch.len() * t, pdim));
    for (img_idx, img) in batch.iter().enumerate() {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = img_idx * t + gy * grid + gx;
                let mut col = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            out[[row, col]] = img.data[[gy * p + y, gx * p + x, c]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn linear(x: &Array2<f64>, l: &LinearParams) -> Array2<f64> {
    let mut y = x.dot(&l.w);
    y += &l.b;
    y
}

/// Backward of `y = x . w + b`; returns dx and accumulates (dw, db).
fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    l: &LinearParams,
    dl: &mut LinearParams,
) -> Array2<f64> {
    dl.w += &x.t().dot(dy);
    dl.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let d = x.ncols();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(x.nrows());
    let mut y = Array2::zeros(x.raw_dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for c in 0..d {
            let h = (row[c] - mean) * istd;
            xhat[[r, c]] = h;
            y[[r, c]] = h * ln.gamma[c] + ln.beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNormParams,
    dln: &mut LayerNormParams,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..dy.ncols() {
            let g = dy[[r, c]];
            let xh = cache.xhat[[r, c]];
            dln.gamma[c] += g * xh;
            dln.beta[c] += g;
            let dxhat = g * ln.gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        }
        let istd = cache.inv_std[r];
        for c in 0..dy.ncols() {
            let dxhat = dy[[r, c]] * ln.gamma[c];
            dx[[r, c]] =
                istd * (dxhat - sum_dxhat / d - cache.xhat[[r, c]] * sum_dxhat_xhat / d);
        }
    }
    dx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub struct AttnCache {
    ln_out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities, one (tokens, tokens) matrix per (image, head).
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

pub struct MlpCache {
    ln_out: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

pub struct ForwardCache {
    pub batch: usize,
    pub tokens: usize,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

/// Multi-head self-attention over one batch; rows of `x` are image-major
/// token sequences.
fn attention(
    x: &Array2<f64>,
    block: &BlockParams,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(x, &block.qkv);
    let q = qkv.slice(s![.., 0..d]).to_owned();
    let k = qkv.slice(s![.., d..2 * d]).to_owned();
    let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();

    let mut ctx = Array2::zeros((batch * tokens, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for img in 0..batch {
        let rows = s![img * tokens..(img + 1) * tokens, ..];
        let q_img = q.slice(rows);
        let k_img = k.slice(rows);
        let v_img = v.slice(rows);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q_img.slice(cols);
            let kh = k_img.slice(cols);
            let vh = v_img.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(s![img * tokens..(img + 1) * tokens, h * dh..(h + 1) * dh])
                .assign(&ctx_h);
            probs.push(scores);
        }
    }
    let out = linear(&ctx, &block.proj);
    (
        out,
        AttnCache {
            ln_out: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

fn attention_backward(
    dout: &Array2<f64>,
    cache: &AttnCache,
    block: &BlockParams,
    dblock: &mut BlockParams,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Array2<f64> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dctx = linear_backward(&cache.ctx, dout, &block.proj, &mut dblock.proj);

    let mut dqkv = Array2::zeros((batch * tokens, 3 * d));
    for img in 0..batch {
        let rows = s![img * tokens..(img + 1) * tokens, ..];
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(rows).slice_move(cols);
            let kh = cache.k.slice(rows).slice_move(cols);
            let vh = cache.v.slice(rows).slice_move(cols);
            let probs = &cache.probs[img * heads + h];
            let dctx_h = dctx
                .slice(s![img * tokens..(img + 1) * tokens, h * dh..(h + 1) * dh]);

            let dprobs = dctx_h.dot(&vh.t());
            let dv = probs.t().dot(&dctx_h);
            // Softmax backward per row: ds = p * (dp - <dp, p>).
            let mut dscores = Array2::zeros(dprobs.raw_dim());
            for r in 0..tokens {
                let mut dot = 0.0;
                for c in 0..tokens {
                    dot += dprobs[[r, c]] * probs[[r, c]];
                }
                for c in 0..tokens {
                    dscores[[r, c]] = probs[[r, c]] * (dprobs[[r, c]] - dot);
                }
            }
            dscores *= scale;
            let dq = dscores.dot(&kh);
            let dk = dscores.t().dot(&qh);

            let tok_range = img * tokens..(img + 1) * tokens;
            dqkv.slice_mut(s![tok_range.clone(), h * dh..(h + 1) * dh])
                .assign(&dq);
            dqkv.slice_mut(s![tok_range.clone(), d + h * dh..d + (h + 1) * dh])
                .assign(&dk);
            dqkv.slice_mut(s![tok_range, 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
    }
    linear_backward(&cache.ln_out, &dqkv, &block.qkv, &mut dblock.qkv)
}

/// Full forward pass: patch embedding + positions, `depth` pre-norm blocks,
/// final layer norm, mean pooling over tokens. Returns (features, cache).
pub fn forward(
    params: &EncoderParams,
    config: &EncoderConfig,
    batch: &[ImageTensor],
) -> (Array2<f64>, ForwardCache) {
    let b = batch.len();
    let t = config.tokens();
    let heads = config.heads;
    let patches = extract_patches(batch, config);
    let mut tokens_mat = linear(&patches, &params.patch);
    for img in 0..b {
        let mut rows = tokens_mat.slice_mut(s![img * t..(img + 1) * t, ..]);
        rows += &params.pos;
    }

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (ln1_out, ln1) = layer_norm(&tokens_mat, &block.ln1);
        let (attn_out, attn) = attention(&ln1_out, block, b, t, heads);
        tokens_mat += &attn_out;
        let (ln2_out, ln2) = layer_norm(&tokens_mat, &block.ln2);
        let pre = linear(&ln2_out, &block.fc1);
        let act = pre.mapv(gelu);
        let mlp_out = linear(&act, &block.fc2);
        tokens_mat += &mlp_out;
        blocks.push(BlockCache {
            ln1,
            attn,
            ln2,
            mlp: MlpCache { ln_out: ln2_out, pre, act },
        });
    }

    let (normed, final_ln) = layer_norm(&tokens_mat, &params.final_ln);
    let mut features = Array2::zeros((b, config.embed_dim));
    for img in 0..b {
        let mean = normed
            .slice(s![img * t..(img + 1) * t, ..])
            .mean_axis(Axis(0))
            .unwrap();
        features.row_mut(img).assign(&mean);
    }
    (
        features,
        ForwardCache {
            batch: b,
            tokens: t,
            patches,
            blocks,
            final_ln,
        },
    )
}

/// Exact reverse-mode gradients of `<features, upstream>` with respect to
/// every parameter.
pub fn backward(
    params: &EncoderParams,
    config: &EncoderConfig,
    cache: &ForwardCache,
    upstream: &Array2<f64>,
) -> EncoderParams {
    let b = cache.batch;
    let t = cache.tokens;
    let heads = config.heads;
    let mut grads = EncoderParams::zeros(config);

    // Mean pool backward: every token row gets upstream / tokens.
    let mut dtokens = Array2::zeros((b * t, config.embed_dim));
    for img in 0..b {
        let g = upstream.row(img).mapv(|v| v / t as f64);
        for row in img * t..(img + 1) * t {
            dtokens.row_mut(row).assign(&g);
        }
    }

    let mut dx = layer_norm_backward(
        &dtokens,
        &cache.final_ln,
        &params.final_ln,
        &mut grads.final_ln,
    );

    for i in (0..params.blocks.len()).rev() {
        let bp = &params.blocks[i];
        let bc = &cache.blocks[i];
        let dblock = &mut grads.blocks[i];
        // MLP branch.
        let dact = linear_backward(&bc.mlp.act, &dx, &bp.fc2, &mut dblock.fc2);
        let mut dpre = dact;
        dpre.zip_mut_with(&bc.mlp.pre, |g, &x| *g *= gelu_grad(x));
        let dln2_out = linear_backward(&bc.mlp.ln_out, &dpre, &bp.fc1, &mut dblock.fc1);
        let dres = layer_norm_backward(&dln2_out, &bc.ln2, &bp.ln2, &mut dblock.ln2);
        dx += &dres;
        // Attention branch.
        let dln1_out = attention_backward(&dx, &bc.attn, bp, dblock, b, t, heads);
        let dres = layer_norm_backward(&dln1_out, &bc.ln1, &bp.ln1, &mut dblock.ln1);
        dx += &dres;
    }

    // Positional embedding: sum over images.
    for img in 0..b {
        grads.pos += &dx.slice(s![img * t..(img + 1) * t, ..]);
    }
    // Patch projection.
    grads.patch.w += &cache.patches.t().dot(&dx);
    grads.patch.b += &dx.sum_axis(Axis(0));
    grads
}
