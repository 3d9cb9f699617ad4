//! A small causal transformer held entirely in f64, with an exact analytic
//! backward pass.
//!
//! The training-side contracts (masked-gradient zeroness, finite-difference
//! agreement, bitwise-reproducible runs) are much easier to verify against a
//! model whose forward and backward are written out explicitly than against
//! an autodiff black box, and the scales involved (a few million parameters)
//! do not need more machinery than this.
//!
//! Architecture: learned token + position embeddings, pre-LayerNorm blocks
//! of causal multi-head attention and a SiLU feed-forward, a final
//! LayerNorm, and an untied unembedding projection.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const PARAMS_MAGIC: &[u8; 8] = b"TTLMPRM1";

/// Model shape and initialization settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Smoke-run preset: lands in the low millions of parameters for
    /// corpus-sized vocabularies.
    pub fn smoke(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            max_seq_len: 256,
            d_model: 192,
            n_heads: 6,
            n_layers: 3,
            d_ff: 768,
            seed,
        }
    }

    /// Gradient-suite preset: small enough that central finite differences
    /// over many probe parameters stay fast.
    pub fn gradient_check(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            max_seq_len: 64,
            d_model: 24,
            n_heads: 2,
            n_layers: 2,
            d_ff: 48,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_layers == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d            // ln1
            + 3 * (d * d + d)            // q, k, v
            + d * d + d                  // output projection
            + 2 * d                      // ln2
            + d * self.d_ff + self.d_ff  // ffn in
            + self.d_ff * d + d; // ffn out
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * per_layer
            + 2 * d
            + d * self.vocab_size
            + self.vocab_size
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Every learnable tensor. The same struct doubles as the gradient and
/// optimizer-moment container so all of them enumerate tensors in one
/// fixed order.
#[derive(Debug, Clone)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Params {
    fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, 0.02).expect("valid stddev");
        let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| dist.sample(&mut rng));
        let d = cfg.d_model;
        let tok_emb = mat(cfg.vocab_size, d);
        let pos_emb = mat(cfg.max_seq_len, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: mat(d, d),
                bq: Array1::zeros(d),
                wk: mat(d, d),
                bk: Array1::zeros(d),
                wv: mat(d, d),
                bv: Array1::zeros(d),
                wo: mat(d, d),
                bo: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: mat(d, cfg.d_ff),
                b1: Array1::zeros(cfg.d_ff),
                w2: mat(cfg.d_ff, d),
                b2: Array1::zeros(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out: mat(d, cfg.vocab_size),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.len());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: z1(&l.ln1_g),
                    ln1_b: z1(&l.ln1_b),
                    wq: z2(&l.wq),
                    bq: z1(&l.bq),
                    wk: z2(&l.wk),
                    bk: z1(&l.bk),
                    wv: z2(&l.wv),
                    bv: z1(&l.bv),
                    wo: z2(&l.wo),
                    bo: z1(&l.bo),
                    ln2_g: z1(&l.ln2_g),
                    ln2_b: z1(&l.ln2_b),
                    w1: z2(&l.w1),
                    b1: z1(&l.b1),
                    w2: z2(&l.w2),
                    b2: z1(&l.b2),
                })
                .collect(),
            lnf_g: z1(&self.lnf_g),
            lnf_b: z1(&self.lnf_b),
            w_out: z2(&self.w_out),
            b_out: z1(&self.b_out),
        }
    }

    /// All tensors as flat slices, in the canonical order used for
    /// serialization, hashing, optimizer state, and flat indexing.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.push(self.tok_emb.as_slice().expect("standard layout"));
        v.push(self.pos_emb.as_slice().expect("standard layout"));
        for l in &self.layers {
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                v.push(t.as_slice().expect("standard layout"));
            }
            for t in [
                &l.ln1_g, &l.ln1_b, &l.bq, &l.bk, &l.bv, &l.bo, &l.ln2_g, &l.ln2_b, &l.b1, &l.b2,
            ] {
                v.push(t.as_slice().expect("standard layout"));
            }
        }
        v.push(self.lnf_g.as_slice().expect("standard layout"));
        v.push(self.lnf_b.as_slice().expect("standard layout"));
        v.push(self.w_out.as_slice().expect("standard layout"));
        v.push(self.b_out.as_slice().expect("standard layout"));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(self.tok_emb.as_slice_mut().expect("standard layout"));
        v.push(self.pos_emb.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            let LayerParams {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            } = l;
            for t in [wq, wk, wv, wo, w1, w2] {
                v.push(t.as_slice_mut().expect("standard layout"));
            }
            for t in [ln1_g, ln1_b, bq, bk, bv, bo, ln2_g, ln2_b, b1, b2] {
                v.push(t.as_slice_mut().expect("standard layout"));
            }
        }
        v.push(self.lnf_g.as_slice_mut().expect("standard layout"));
        v.push(self.lnf_b.as_slice_mut().expect("standard layout"));
        v.push(self.w_out.as_slice_mut().expect("standard layout"));
        v.push(self.b_out.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut rest = idx;
        for t in self.tensors() {
            if rest < t.len() {
                return t[rest];
            }
            rest -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn add_flat(&mut self, idx: usize, delta: f64) {
        let mut rest = idx;
        for t in self.tensors_mut() {
            if rest < t.len() {
                t[rest] += delta;
                return;
            }
            rest -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// Element-wise accumulate (for gradient accumulation across
    /// micro-batches).
    pub fn add_assign(&mut self, other: &Params, scale: f64) {
        let others = other.tensors();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            for (m, t) in mine.iter_mut().zip(theirs.iter()) {
                *m += scale * t;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_params() * 8);
        for t in self.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn fill_from_le_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.n_params() * 8 {
            return Err(Error::format(format!(
                "parameter payload holds {} bytes, expected {}",
                bytes.len(),
                self.n_params() * 8
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            for x in t {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[offset..offset + 8]);
                *x = f64::from_le_bytes(buf);
                offset += 8;
            }
        }
        Ok(())
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    ffn_z: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

/// Intermediate activations retained by [`Model::forward`] for the
/// backward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for (j, v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * is;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    g_grad: &mut Array1<f64>,
    b_grad: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    for (dy_row, xhat_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        for (j, (dyv, xv)) in dy_row.iter().zip(xhat_row.iter()).enumerate() {
            g_grad[j] += dyv * xv;
            b_grad[j] += dyv;
        }
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dy_row = dy.row(i);
        let xhat_row = cache.xhat.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let dxhat: Vec<f64> = dy_row
            .iter()
            .zip(g.iter())
            .map(|(dyv, gv)| dyv * gv)
            .collect();
        for (dxh, xv) in dxhat.iter().zip(xhat_row.iter()) {
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xv;
        }
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is * (dxhat[j] - sum_dxhat / d - xhat_row[j] * sum_dxhat_xhat / d);
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The model: immutable config plus mutable parameters.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Attention intermediates: (q, k, v, per-head probabilities, context).
type AttnForward = (
    Array2<f64>,
    Array2<f64>,
    Array2<f64>,
    Vec<Array2<f64>>,
    Array2<f64>,
);

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    /// SHA-256 over the canonical little-endian parameter serialization.
    pub fn params_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(PARAMS_MAGIC);
        hasher.update(self.params.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        if ids.is_empty() {
            return Err(Error::validation("cannot run the model on zero tokens"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Truncation {
                actual: ids.len(),
                max_len: self.config.max_seq_len,
            });
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::validation(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let row = &self.params.tok_emb.row(id as usize) + &self.params.pos_emb.row(t);
            x.row_mut(t).assign(&row);
        }
        Ok(x)
    }

    /// Full forward pass over a token sequence. Returns logits with one row
    /// per input position (row `t` scores the token at position `t + 1`)
    /// and the cache needed by [`Model::backward`].
    pub fn forward(&self, ids: &[u32]) -> Result<(Array2<f64>, ForwardCache)> {
        let mut x = self.embed(ids)?;
        let mut layer_caches = Vec::with_capacity(self.config.n_layers);
        for layer in &self.params.layers {
            let (z, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let (q, k, v, probs, ctx) = self.attention_forward(layer, &z);
            let attn_out = ctx.dot(&layer.wo) + &layer.bo;
            let x1 = &x + &attn_out;
            let (z2, ln2) = layer_norm(&x1, &layer.ln2_g, &layer.ln2_b);
            let pre = z2.dot(&layer.w1) + &layer.b1;
            let act = pre.mapv(|p| p * sigmoid(p));
            let ffn_out = act.dot(&layer.w2) + &layer.b2;
            x = &x1 + &ffn_out;
            layer_caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                ffn_z: z2,
                ffn_pre: pre,
                ffn_act: act,
            });
        }
        let (hf, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        let logits = hf.dot(&self.params.w_out) + &self.params.b_out;
        Ok((
            logits,
            ForwardCache {
                ids: ids.to_vec(),
                layers: layer_caches,
                lnf,
                hf,
            },
        ))
    }

    fn attention_forward(&self, layer: &LayerParams, z: &Array2<f64>) -> AttnForward {
        let t_len = z.nrows();
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q = z.dot(&layer.wq) + &layer.bq;
        let k = z.dot(&layer.wk) + &layer.bk;
        let v = z.dot(&layer.wv) + &layer.bv;
        let mut ctx = Array2::zeros((t_len, self.config.d_model));
        let mut probs_all = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut probs = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let qi = qh.row(i);
                let mut row = vec![0.0; i + 1];
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = qi.dot(&kh.row(j)) * scale;
                    if *slot > max {
                        max = *slot;
                    }
                }
                let mut denom = 0.0;
                for slot in &mut row {
                    *slot = (*slot - max).exp();
                    denom += *slot;
                }
                for (j, p) in row.iter().enumerate() {
                    probs[[i, j]] = p / denom;
                }
            }
            ctx.slice_mut(cols).assign(&probs.dot(&vh));
            probs_all.push(probs);
        }
        (q, k, v, probs_all, ctx)
    }

    /// Backward pass: given d(loss)/d(logits), accumulate parameter
    /// gradients into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grads: &mut Params) {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        grads.w_out = &grads.w_out + &cache.hf.t().dot(dlogits);
        grads.b_out = &grads.b_out + &dlogits.sum_axis(Axis(0));
        let dhf = dlogits.dot(&self.params.w_out.t());
        let mut dx = layer_norm_backward(
            &dhf,
            &cache.lnf,
            &self.params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for (li, layer) in self.params.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let lg = &mut grads.layers[li];

            // x2 = x1 + ffn(ln2(x1))
            let dffn_out = &dx;
            lg.w2 = &lg.w2 + &lc.ffn_act.t().dot(dffn_out);
            lg.b2 = &lg.b2 + &dffn_out.sum_axis(Axis(0));
            let dact = dffn_out.dot(&layer.w2.t());
            let dpre = &dact
                * &lc.ffn_pre.mapv(|p| {
                    let s = sigmoid(p);
                    s * (1.0 + p * (1.0 - s))
                });
            lg.w1 = &lg.w1 + &lc.ffn_z.t().dot(&dpre);
            lg.b1 = &lg.b1 + &dpre.sum_axis(Axis(0));
            let dz2 = dpre.dot(&layer.w1.t());
            let dx1_via_ln =
                layer_norm_backward(&dz2, &lc.ln2, &layer.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
            let dx1 = &dx + &dx1_via_ln;

            // x1 = x0 + Wo·ctx + bo
            lg.wo = &lg.wo + &lc.ctx.t().dot(&dx1);
            lg.bo = &lg.bo + &dx1.sum_axis(Axis(0));
            let dctx = dx1.dot(&layer.wo.t());

            let t_len = dctx.nrows();
            let mut dq = Array2::zeros((t_len, self.config.d_model));
            let mut dk = Array2::zeros((t_len, self.config.d_model));
            let mut dv = Array2::zeros((t_len, self.config.d_model));
            for h in 0..self.config.n_heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let probs = &lc.probs[h];
                let dctxh = dctx.slice(cols);
                let vh = lc.v.slice(cols);
                let kh = lc.k.slice(cols);
                let qh = lc.q.slice(cols);
                // probs rows above the diagonal are exactly 0, so the
                // matmuls below never mix in acausal positions.
                let dprobs = dctxh.dot(&vh.t());
                let dvh = probs.t().dot(&dctxh);
                let mut dscores = Array2::zeros((t_len, t_len));
                for i in 0..t_len {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += dprobs[[i, j]] * probs[[i, j]];
                    }
                    for j in 0..=i {
                        dscores[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
                    }
                }
                let dqh = dscores.dot(&kh).mapv(|x| x * scale);
                let dkh = dscores.t().dot(&qh).mapv(|x| x * scale);
                dq.slice_mut(cols).assign(&dqh);
                dk.slice_mut(cols).assign(&dkh);
                dv.slice_mut(cols).assign(&dvh);
            }
            let z = {
                // reconstruct ln1 output from its cache (cheaper than storing it)
                &lc.ln1.xhat * &layer.ln1_g + &layer.ln1_b
            };
            lg.wq = &lg.wq + &z.t().dot(&dq);
            lg.bq = &lg.bq + &dq.sum_axis(Axis(0));
            lg.wk = &lg.wk + &z.t().dot(&dk);
            lg.bk = &lg.bk + &dk.sum_axis(Axis(0));
            lg.wv = &lg.wv + &z.t().dot(&dv);
            lg.bv = &lg.bv + &dv.sum_axis(Axis(0));
            let dz = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            let dx0_via_ln =
                layer_norm_backward(&dz, &lc.ln1, &layer.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
            dx = &dx1 + &dx0_via_ln;
        }

        for (t, &id) in cache.ids.iter().enumerate() {
            let drow = dx.row(t);
            let mut tok_row = grads.tok_emb.row_mut(id as usize);
            tok_row += &drow;
            let mut pos_row = grads.pos_emb.row_mut(t);
            pos_row += &drow;
        }
    }

    /// Logits for the last position only, growing `state` by one token.
    /// Feeding the same tokens through [`Model::forward`] gives identical
    /// rows; this is the O(t) incremental path used for generation.
    pub fn step(&self, state: &mut GenState, id: u32) -> Result<Array1<f64>> {
        let pos = state.len;
        if pos >= self.config.max_seq_len {
            return Err(Error::Truncation {
                actual: pos + 1,
                max_len: self.config.max_seq_len,
            });
        }
        if id as usize >= self.config.vocab_size {
            return Err(Error::validation(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x =
            (&self.params.tok_emb.row(id as usize) + &self.params.pos_emb.row(pos)).into_owned();
        for (li, layer) in self.params.layers.iter().enumerate() {
            let z = ln_row(&x, &layer.ln1_g, &layer.ln1_b);
            let q = z.dot(&layer.wq) + &layer.bq;
            let k = z.dot(&layer.wk) + &layer.bk;
            let v = z.dot(&layer.wv) + &layer.bv;
            state.keys[li].push(k);
            state.vals[li].push(v);
            let mut attn = Array1::zeros(self.config.d_model);
            for h in 0..self.config.n_heads {
                let span = h * hd..(h + 1) * hd;
                let qh = q.slice(s![span.clone()]);
                let mut scores: Vec<f64> = state.keys[li]
                    .iter()
                    .map(|krow| qh.dot(&krow.slice(s![span.clone()])) * scale)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for sc in &mut scores {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for (j, sc) in scores.iter().enumerate() {
                    let w = sc / denom;
                    let vrow = &state.vals[li][j];
                    for (slot, vv) in attn
                        .slice_mut(s![span.clone()])
                        .iter_mut()
                        .zip(vrow.slice(s![span.clone()]).iter())
                    {
                        *slot += w * vv;
                    }
                }
            }
            let attn_out = attn.dot(&layer.wo) + &layer.bo;
            let x1 = &x + &attn_out;
            let z2 = ln_row(&x1, &layer.ln2_g, &layer.ln2_b);
            let pre = z2.dot(&layer.w1) + &layer.b1;
            let act = pre.mapv(|p| p * sigmoid(p));
            x = &x1 + &act.dot(&layer.w2);
            x += &layer.b2;
        }
        let hf = ln_row(&x, &self.params.lnf_g, &self.params.lnf_b);
        state.len += 1;
        Ok(hf.dot(&self.params.w_out) + &self.params.b_out)
    }

    pub fn new_gen_state(&self) -> GenState {
        GenState {
            keys: vec![Vec::new(); self.config.n_layers],
            vals: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_vec_pretty(&self.config)?,
        )?;
        let mut payload = Vec::with_capacity(8 + self.n_params() * 8);
        payload.extend_from_slice(PARAMS_MAGIC);
        payload.extend_from_slice(&self.params.to_le_bytes());
        fs::write(dir.join("params.bin"), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_bytes = fs::read(dir.join("config.json")).map_err(|e| {
            Error::validation(format!("cannot read checkpoint {}: {e}", dir.display()))
        })?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
        config.validate()?;
        let payload = fs::read(dir.join("params.bin"))?;
        if payload.len() < 8 || &payload[..8] != PARAMS_MAGIC {
            return Err(Error::format(format!(
                "{} is not a parameter file",
                dir.join("params.bin").display()
            )));
        }
        let mut params = Params::init(&config);
        params.fill_from_le_bytes(&payload[8..])?;
        Ok(Self { config, params })
    }
}

fn ln_row(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let is = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_iter(
        x.iter()
            .zip(g.iter())
            .zip(b.iter())
            .map(|((xv, gv), bv)| (xv - mean) * is * gv + bv),
    )
}

/// Per-layer key/value cache for incremental decoding.
pub struct GenState {
    keys: Vec<Vec<Array1<f64>>>,
    vals: Vec<Vec<Array1<f64>>>,
    len: usize,
}

impl GenState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params,
    v: Params,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        // v needs a second mutable borrow; collect raw slices first.
        let mut v_tensors = self.v.tensors_mut();
        let p_tensors = params.tensors_mut();
        for (((p, g), m), v) in p_tensors
            .into_iter()
            .zip(g_tensors)
            .zip(m_tensors)
            .zip(v_tensors.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}
