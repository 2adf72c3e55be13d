//! Micro autoregressive token model with low-rank adapters.
//!
//! Architecture, per position `t` of a sequence `x₀ … x_{L-1}` (inputs are
//! `x₀ … x_{L-2}`, targets `x₁ … x_{L-1}`):
//!
//! ```text
//! h⁰_t   = E[x_t] + P[t]
//! q_t    = (Wq + s·Bq·Aq) hˡ_t          k_t = Wk hˡ_t
//! v_t    = (Wv + s·Bv·Av) hˡ_t
//! a_tu   = softmax_{u ≤ t}(q_t · k_u / √H)
//! hˡ⁺¹_t = hˡ_t + Σ_u a_tu v_u
//! z_t    = W_out h^N_t + b_out
//! ```
//!
//! Only the adapter factors `(Aq, Bq, Av, Bv)` of every block are trainable;
//! `s = alpha / rank`. Loss is next-token cross-entropy averaged per token
//! within a sequence, then averaged over sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot_slices, ParamVec, RngState};

/// Output-bias penalty applied to a contiguous token range of the frozen
/// base. This is how the base model encodes "this content is unlikely".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPrior {
    pub first_token: u32,
    pub end_token: u32,
    pub min_penalty: f64,
    pub max_penalty: f64,
    /// Penalties rise linearly from `min_penalty` at `first_token` to
    /// `max_penalty` at the last token instead of being drawn at random.
    #[serde(default)]
    pub ramp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub adapter_rank: usize,
    /// Adapter output is scaled by `adapter_alpha / adapter_rank`.
    pub adapter_alpha: f64,
    /// Standard deviation of the frozen output logits at init.
    pub logit_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub output_prior: Option<OutputPrior>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            context_len: 12,
            hidden_dim: 64,
            n_blocks: 2,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            logit_scale: 1.0,
            seed: 42,
            output_prior: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab-size must be >= 2");
        }
        if self.context_len < 2 {
            return bad("context-len must be >= 2");
        }
        if self.hidden_dim == 0 {
            return bad("hidden-dim must be positive");
        }
        if !(1..=2).contains(&self.n_blocks) {
            return bad("n-blocks must be 1 or 2");
        }
        if self.adapter_rank == 0 || self.adapter_rank >= self.hidden_dim {
            return bad("adapter-rank must satisfy 0 < rank < hidden-dim");
        }
        if !(self.adapter_alpha.is_finite() && self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return bad("adapter-alpha and logit-scale must be finite");
        }
        if let Some(p) = &self.output_prior {
            if p.first_token >= p.end_token || p.end_token as usize > self.vocab_size {
                return bad("output-prior token range out of bounds");
            }
            if !(p.min_penalty <= p.max_penalty) {
                return bad("output-prior needs min-penalty <= max-penalty");
            }
        }
        Ok(())
    }

    /// Trainable parameter count: two adapted `H x H` matrices per block,
    /// each contributing `rank * (rows + cols)`.
    pub fn adapter_params(&self) -> usize {
        self.n_blocks * 2 * self.adapter_rank * 2 * self.hidden_dim
    }

    pub fn adapter_scale(&self) -> f64 {
        self.adapter_alpha / self.adapter_rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

/// Frozen base weights. Row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenWeights {
    /// `vocab x hidden`
    pub tok_emb: Vec<f64>,
    /// `context x hidden`
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    /// `vocab x hidden`
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl FrozenWeights {
    /// All frozen entries in a fixed order, for comparisons.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.tok_emb);
        out.extend_from_slice(&self.pos_emb);
        for b in &self.blocks {
            out.extend_from_slice(&b.wq);
            out.extend_from_slice(&b.wk);
            out.extend_from_slice(&b.wv);
        }
        out.extend_from_slice(&self.w_out);
        out.extend_from_slice(&self.b_out);
        out
    }
}

/// Non-empty list of token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    sequences: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Concatenates several batches into one.
    pub fn concat<'a>(batches: impl IntoIterator<Item = &'a Batch>) -> Result<Batch> {
        Batch::new(batches.into_iter().flat_map(|b| b.sequences.iter().cloned()).collect())
    }
}

/// Differentiable loss over a flat parameter vector. Implemented by
/// [`MicroModel`] and by analytic surrogates used to check the optimizers.
pub trait Objective {
    fn dim(&self) -> usize;

    fn loss(&self, params: &ParamVec, batch: &Batch) -> Result<f64>;

    fn loss_and_grad(&self, params: &ParamVec, batch: &Batch) -> Result<(f64, ParamVec)>;

    /// Loss of each sequence of the batch separately.
    fn per_sequence_losses(&self, params: &ParamVec, batch: &Batch) -> Result<Vec<f64>> {
        batch
            .sequences()
            .iter()
            .map(|s| self.loss(params, &Batch::new(vec![s.clone()])?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroModel {
    spec: ModelSpec,
    frozen: FrozenWeights,
}

/// Initializes frozen weights and adapter factors from `spec.seed`.
///
/// `A` factors are Gaussian with std `1/sqrt(H)`, `B` factors are zero, so
/// the returned adapters leave the frozen model's output unchanged.
pub fn init_model(spec: &ModelSpec) -> Result<(MicroModel, ParamVec)> {
    spec.validate()?;
    let (v, t, h) = (spec.vocab_size, spec.context_len, spec.hidden_dim);
    let frozen_state = RngState::new(spec.seed, 0);
    let mut rng = frozen_state.rng();
    let mut gauss = |n: usize, std: f64| -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let inv_sqrt_h = 1.0 / (h as f64).sqrt();
    let tok_emb = gauss(v * h, 1.0);
    let pos_emb = gauss(t * h, 0.5);
    let blocks = (0..spec.n_blocks)
        .map(|_| BlockWeights {
            wq: gauss(h * h, inv_sqrt_h),
            wk: gauss(h * h, inv_sqrt_h),
            wv: gauss(h * h, 0.5 * inv_sqrt_h),
        })
        .collect();
    let w_out = gauss(v * h, spec.logit_scale * inv_sqrt_h);
    let mut b_out = vec![0.0; v];
    if let Some(prior) = &spec.output_prior {
        let mut prior_rng = frozen_state.fork(1).rng();
        let range = &mut b_out[prior.first_token as usize..prior.end_token as usize];
        let last = range.len().saturating_sub(1).max(1) as f64;
        for (i, b) in range.iter_mut().enumerate() {
            *b = -if prior.ramp {
                prior.min_penalty + (prior.max_penalty - prior.min_penalty) * i as f64 / last
            } else if prior.max_penalty > prior.min_penalty {
                prior_rng.random_range(prior.min_penalty..prior.max_penalty)
            } else {
                prior.min_penalty
            };
        }
    }
    let frozen = FrozenWeights {
        tok_emb,
        pos_emb,
        blocks,
        w_out,
        b_out,
    };

    let r = spec.adapter_rank;
    let mut rng = frozen_state.fork(2).rng();
    let dist = Normal::new(0.0, inv_sqrt_h).expect("valid std");
    let mut adapters = Vec::with_capacity(spec.adapter_params());
    for _ in 0..spec.n_blocks {
        for _ in 0..2 {
            adapters.extend((0..r * h).map(|_| dist.sample(&mut rng)));
            adapters.extend(std::iter::repeat_n(0.0, h * r));
        }
    }
    Ok((MicroModel { spec: spec.clone(), frozen }, ParamVec::new(adapters)?))
}

struct Adapter<'a> {
    a: &'a [f64],
    b: &'a [f64],
}

struct BlockView<'a> {
    q: Adapter<'a>,
    v: Adapter<'a>,
}

/// Per-block activations cached for the backward pass.
struct BlockCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

struct EffectiveWeights {
    wq: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot_slices(row, x);
    }
}

/// `out += Wᵀ x`
fn matvec_t_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

impl MicroModel {
    pub fn from_parts(spec: ModelSpec, frozen: FrozenWeights) -> Result<Self> {
        spec.validate()?;
        let (v, t, h) = (spec.vocab_size, spec.context_len, spec.hidden_dim);
        let ok = frozen.tok_emb.len() == v * h
            && frozen.pos_emb.len() == t * h
            && frozen.blocks.len() == spec.n_blocks
            && frozen
                .blocks
                .iter()
                .all(|b| b.wq.len() == h * h && b.wk.len() == h * h && b.wv.len() == h * h)
            && frozen.w_out.len() == v * h
            && frozen.b_out.len() == v;
        if !ok {
            return Err(Error::InvalidSpec("frozen weight shapes do not match spec".into()));
        }
        Ok(Self { spec, frozen })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn frozen(&self) -> &FrozenWeights {
        &self.frozen
    }

    /// Mean per-token cross-entropy, averaged over sequences.
    pub fn forward_loss(&self, params: &ParamVec, batch: &Batch) -> Result<f64> {
        self.validate(params, batch)?;
        let eff = self.effective(params);
        let mut total = 0.0;
        for seq in batch.sequences() {
            total += self.sequence_pass(&eff, seq, None);
        }
        Ok(total / batch.len() as f64)
    }

    /// Exact gradient of [`forward_loss`](Self::forward_loss) with respect to
    /// the adapter parameters.
    pub fn grad_loss(&self, params: &ParamVec, batch: &Batch) -> Result<ParamVec> {
        Ok(self.loss_and_grad_impl(params, batch)?.1)
    }

    pub fn per_sequence_losses(&self, params: &ParamVec, batch: &Batch) -> Result<Vec<f64>> {
        self.validate(params, batch)?;
        let eff = self.effective(params);
        Ok(batch
            .sequences()
            .iter()
            .map(|seq| self.sequence_pass(&eff, seq, None))
            .collect())
    }

    fn loss_and_grad_impl(&self, params: &ParamVec, batch: &Batch) -> Result<(f64, ParamVec)> {
        self.validate(params, batch)?;
        let h = self.spec.hidden_dim;
        let eff = self.effective(params);
        let mut gw = GradAcc {
            wq: vec![vec![0.0; h * h]; self.spec.n_blocks],
            wv: vec![vec![0.0; h * h]; self.spec.n_blocks],
            weight: 1.0 / batch.len() as f64,
        };
        let mut total = 0.0;
        for seq in batch.sequences() {
            total += self.sequence_pass(&eff, seq, Some(&mut gw));
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss}")));
        }

        // Chain rule through W_eff = W + s·B·A.
        let r = self.spec.adapter_rank;
        let s = self.spec.adapter_scale();
        let mut grad = vec![0.0; self.spec.adapter_params()];
        for blk in 0..self.spec.n_blocks {
            let view = self.block_view(params, blk);
            let base = blk * 4 * r * h;
            let pairs = [(&view.q, &gw.wq[blk], base), (&view.v, &gw.wv[blk], base + 2 * r * h)];
            for (adapter, g, off) in pairs {
                let (ga, gb) = grad[off..off + 2 * r * h].split_at_mut(r * h);
                // dA = s·Bᵀ G  (r x H)
                for k in 0..r {
                    let row = &mut ga[k * h..(k + 1) * h];
                    for i in 0..h {
                        let bik = adapter.b[i * r + k];
                        if bik == 0.0 {
                            continue;
                        }
                        for (dst, gij) in row.iter_mut().zip(&g[i * h..(i + 1) * h]) {
                            *dst += s * bik * gij;
                        }
                    }
                }
                // dB = s·G Aᵀ  (H x r)
                for i in 0..h {
                    let grow = &g[i * h..(i + 1) * h];
                    for k in 0..r {
                        gb[i * r + k] = s * dot_slices(grow, &adapter.a[k * h..(k + 1) * h]);
                    }
                }
            }
        }
        Ok((loss, ParamVec::new(grad)?))
    }

    fn validate(&self, params: &ParamVec, batch: &Batch) -> Result<()> {
        if params.dim() != self.spec.adapter_params() {
            return Err(Error::DimMismatch {
                expected: self.spec.adapter_params(),
                got: params.dim(),
            });
        }
        for (index, seq) in batch.sequences().iter().enumerate() {
            if seq.len() < 2 {
                return Err(Error::EmptyTarget { index, len: seq.len() });
            }
            if seq.len() > self.spec.context_len {
                return Err(Error::ContextOverflow {
                    index,
                    len: seq.len(),
                    context: self.spec.context_len,
                });
            }
            if let Some(&token) = seq.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
                return Err(Error::BadToken {
                    token,
                    vocab: self.spec.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn block_view<'a>(&self, params: &'a ParamVec, blk: usize) -> BlockView<'a> {
        let (r, h) = (self.spec.adapter_rank, self.spec.hidden_dim);
        let p = &params.as_slice()[blk * 4 * r * h..(blk + 1) * 4 * r * h];
        let (q, v) = p.split_at(2 * r * h);
        let (qa, qb) = q.split_at(r * h);
        let (va, vb) = v.split_at(r * h);
        BlockView {
            q: Adapter { a: qa, b: qb },
            v: Adapter { a: va, b: vb },
        }
    }

    fn effective(&self, params: &ParamVec) -> EffectiveWeights {
        let (r, h) = (self.spec.adapter_rank, self.spec.hidden_dim);
        let s = self.spec.adapter_scale();
        let merge = |w: &[f64], ad: &Adapter| -> Vec<f64> {
            let mut out = w.to_vec();
            for i in 0..h {
                for k in 0..r {
                    let bik = ad.b[i * r + k];
                    if bik == 0.0 {
                        continue;
                    }
                    let arow = &ad.a[k * h..(k + 1) * h];
                    for (o, akj) in out[i * h..(i + 1) * h].iter_mut().zip(arow) {
                        *o += s * bik * akj;
                    }
                }
            }
            out
        };
        let mut eff = EffectiveWeights {
            wq: Vec::new(),
            wv: Vec::new(),
        };
        for (blk, w) in self.frozen.blocks.iter().enumerate() {
            let view = self.block_view(params, blk);
            eff.wq.push(merge(&w.wq, &view.q));
            eff.wv.push(merge(&w.wv, &view.v));
        }
        eff
    }

    /// Forward pass of one sequence, returning its mean per-token loss. When
    /// `grad` is given, accumulates `∂loss/∂W_eff` for every adapted matrix,
    /// weighted by `grad.weight`.
    fn sequence_pass(
        &self,
        eff: &EffectiveWeights,
        seq: &[u32],
        grad: Option<&mut GradAcc>,
    ) -> f64 {
        let h = self.spec.hidden_dim;
        let vsz = self.spec.vocab_size;
        let n = seq.len() - 1;
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        let fw = &self.frozen;

        let mut hid = vec![0.0; n * h];
        for t in 0..n {
            let tok = seq[t] as usize;
            for j in 0..h {
                hid[t * h + j] = fw.tok_emb[tok * h + j] + fw.pos_emb[t * h + j];
            }
        }

        let mut caches = Vec::with_capacity(self.spec.n_blocks);
        for (blk, w) in fw.blocks.iter().enumerate() {
            let mut q = vec![0.0; n * h];
            let mut k = vec![0.0; n * h];
            let mut v = vec![0.0; n * h];
            for t in 0..n {
                let x = &hid[t * h..(t + 1) * h];
                matvec(&eff.wq[blk], x, &mut q[t * h..(t + 1) * h]);
                matvec(&w.wk, x, &mut k[t * h..(t + 1) * h]);
                matvec(&eff.wv[blk], x, &mut v[t * h..(t + 1) * h]);
            }
            let mut attn = vec![0.0; n * n];
            let mut next = hid.clone();
            for t in 0..n {
                let qt = &q[t * h..(t + 1) * h];
                let row = &mut attn[t * n..t * n + t + 1];
                let mut max = f64::NEG_INFINITY;
                for (u, a) in row.iter_mut().enumerate() {
                    *a = dot_slices(qt, &k[u * h..(u + 1) * h]) * inv_sqrt_h;
                    max = max.max(*a);
                }
                let mut z = 0.0;
                for a in row.iter_mut() {
                    *a = (*a - max).exp();
                    z += *a;
                }
                for a in row.iter_mut() {
                    *a /= z;
                }
                let out = &mut next[t * h..(t + 1) * h];
                for (u, a) in row.iter().enumerate() {
                    for (o, vu) in out.iter_mut().zip(&v[u * h..(u + 1) * h]) {
                        *o += a * vu;
                    }
                }
            }
            caches.push(BlockCache {
                input: std::mem::replace(&mut hid, next),
                q,
                k,
                v,
                attn,
            });
        }

        let mut loss = 0.0;
        let mut probs = vec![0.0; n * vsz];
        for t in 0..n {
            let logits = &mut probs[t * vsz..(t + 1) * vsz];
            matvec(&fw.w_out, &hid[t * h..(t + 1) * h], logits);
            let mut max = f64::NEG_INFINITY;
            for (l, b) in logits.iter_mut().zip(&fw.b_out) {
                *l += b;
                max = max.max(*l);
            }
            let mut z = 0.0;
            for l in logits.iter() {
                z += (l - max).exp();
            }
            let lse = max + z.ln();
            let target = seq[t + 1] as usize;
            loss += lse - logits[target];
            for l in logits.iter_mut() {
                *l = (*l - lse).exp();
            }
        }
        let seq_loss = loss / n as f64;

        let Some(acc) = grad else {
            return seq_loss;
        };

        // Backward.
        let w_tok = acc.weight / n as f64;
        let mut dh = vec![0.0; n * h];
        for t in 0..n {
            let dz = &mut probs[t * vsz..(t + 1) * vsz];
            dz[seq[t + 1] as usize] -= 1.0;
            dz.iter_mut().for_each(|d| *d *= w_tok);
            matvec_t_add(&fw.w_out, dz, &mut dh[t * h..(t + 1) * h]);
        }

        for (blk, cache) in caches.iter().enumerate().rev() {
            let w = &fw.blocks[blk];
            let dc = dh.clone(); // residual passes dh through unchanged
            let mut dv = vec![0.0; n * h];
            let mut dq = vec![0.0; n * h];
            let mut dk = vec![0.0; n * h];
            let mut da = vec![0.0; n];
            for t in 0..n {
                let dct = &dc[t * h..(t + 1) * h];
                let arow = &cache.attn[t * n..t * n + t + 1];
                let mut mean = 0.0;
                for u in 0..=t {
                    da[u] = dot_slices(dct, &cache.v[u * h..(u + 1) * h]);
                    mean += arow[u] * da[u];
                    let a = arow[u];
                    for (d, c) in dv[u * h..(u + 1) * h].iter_mut().zip(dct) {
                        *d += a * c;
                    }
                }
                for u in 0..=t {
                    let ds = arow[u] * (da[u] - mean) * inv_sqrt_h;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..h {
                        dq[t * h + j] += ds * cache.k[u * h + j];
                        dk[u * h + j] += ds * cache.q[t * h + j];
                    }
                }
            }
            for t in 0..n {
                let x = &cache.input[t * h..(t + 1) * h];
                let dht = &mut dh[t * h..(t + 1) * h];
                matvec_t_add(&eff.wq[blk], &dq[t * h..(t + 1) * h], dht);
                matvec_t_add(&w.wk, &dk[t * h..(t + 1) * h], dht);
                matvec_t_add(&eff.wv[blk], &dv[t * h..(t + 1) * h], dht);
                outer_add(&mut acc.wq[blk], &dq[t * h..(t + 1) * h], x);
                outer_add(&mut acc.wv[blk], &dv[t * h..(t + 1) * h], x);
            }
        }
        seq_loss
    }
}

struct GradAcc {
    wq: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    weight: f64,
}

/// `m += a bᵀ`
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (ai, row) in a.iter().zip(m.chunks_exact_mut(cols)) {
        if *ai == 0.0 {
            continue;
        }
        for (mij, bj) in row.iter_mut().zip(b) {
            *mij += ai * bj;
        }
    }
}

impl Objective for MicroModel {
    fn dim(&self) -> usize {
        self.spec.adapter_params()
    }

    fn loss(&self, params: &ParamVec, batch: &Batch) -> Result<f64> {
        self.forward_loss(params, batch)
    }

    fn loss_and_grad(&self, params: &ParamVec, batch: &Batch) -> Result<(f64, ParamVec)> {
        self.loss_and_grad_impl(params, batch)
    }

    fn per_sequence_losses(&self, params: &ParamVec, batch: &Batch) -> Result<Vec<f64>> {
        MicroModel::per_sequence_losses(self, params, batch)
    }
}

/// Adapter parameters of the base state and of the fine-tuned state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPair {
    pub spec: ModelSpec,
    pub base: ParamVec,
    pub tuned: ParamVec,
}

impl CheckpointPair {
    pub fn new(spec: ModelSpec, base: ParamVec, tuned: ParamVec) -> Result<Self> {
        let p = spec.adapter_params();
        for v in [&base, &tuned] {
            if v.dim() != p {
                return Err(Error::DimMismatch {
                    expected: p,
                    got: v.dim(),
                });
            }
        }
        Ok(Self { spec, base, tuned })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.2,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    /// Full-corpus loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Plain SGD on the adapters over `corpus`, reshuffled every epoch.
pub fn train_retain(
    model: &MicroModel,
    params: &ParamVec,
    corpus: &Batch,
    cfg: &TrainConfig,
    rng: RngState,
) -> Result<(ParamVec, TrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidSpec("batch-size must be positive".into()));
    }
    let initial_loss = model.forward_loss(params, corpus)?;
    let mut theta = params.clone();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = rng.rng();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| corpus.sequences()[i].clone()).collect())?;
            let (loss, grad) = match model.loss_and_grad_impl(&theta, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            if cfg.lr != 0.0 {
                theta = theta.axpy(-cfg.lr, &grad).map_err(|_| Error::Diverged { step })?;
            }
            step += 1;
        }
        let loss = model.forward_loss(&theta, corpus)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        epoch_losses.push(loss);
    }
    Ok((
        theta,
        TrainLog {
            initial_loss,
            epoch_losses,
            steps: step,
        },
    ))
}
