//! k-gram feed-forward language model.
//!
//! The model conditions on the previous `k` tokens only, an approximation of
//! the full-prefix objective that keeps gradients hand-derivable:
//!
//! ```text
//! x      = concat(E[t_{i-k}], ..., E[t_{i-1}])        (k*d)
//! hidden = tanh(x W1 + b1)                             (h)
//! logits = W_out hidden + b2                           (|V|)
//! log P(t_i | context) = log_softmax(logits)[t_i]
//! ```
//!
//! Positions near the start of a sequence are left-padded with `sep_id`.
//! `W_out` is stored token-major (`|V| x h`) so that vocabulary extension
//! appends rows to both `E` and `W_out` in the same way.
//!
//! Forward and backward passes run in `f64`. Batch gradients are summed per
//! fixed-size chunk of sequences and the chunk sums are reduced in a fixed
//! pairwise order, so results are bitwise identical for any thread count.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Stream;
use crate::vocab::{self, Vocab};

/// Sequences per gradient accumulation chunk.
const CHUNK: usize = 4;
const INIT_DOMAIN: u64 = 0x494e_4954;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Left padding for contexts that reach past the sequence start.
    pub sep_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "context, embed_dim and hidden_dim must be at least 1".into(),
            ));
        }
        if self.vocab_size == 0 || self.sep_id as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "sep_id {} outside vocab of size {}",
                self.sep_id, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// `|V| x d`
    pub embedding: Matrix<f64>,
    /// `(k*d) x h`
    pub w1: Matrix<f64>,
    pub b1: Vec<f64>,
    /// `|V| x h`
    pub output: Matrix<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (v, d, h, k) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.context);
        Ok(Self {
            cfg,
            embedding: Matrix::zeros(v, d),
            w1: Matrix::zeros(k * d, h),
            b1: vec![0.0; h],
            output: Matrix::zeros(v, h),
            b2: vec![0.0; v],
        })
    }

    /// Normal(0, 0.02) matrices and zero biases, drawn in the order
    /// embedding, w1, output.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = Stream::derive(seed, INIT_DOMAIN, 0);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for m in [&mut p.embedding, &mut p.w1, &mut p.output] {
            for v in m.as_mut_slice() {
                *v = normal.sample(rng.inner_mut());
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter tensors in a fixed order: embedding, w1, b1, output, b2.
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.embedding.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.output.as_slice(),
            &self.b2,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.embedding.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.output.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        for s in g.slices_mut() {
            s.fill(0.0);
        }
        g
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.cfg.vocab_size;
        match ids.iter().find(|&&id| id as usize >= v) {
            Some(&id) => Err(Error::TokenRange { id, vocab: v }),
            None => Ok(()),
        }
    }

    /// Log-probabilities of the next token given exactly `k` context ids,
    /// oldest first.
    pub fn log_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.len() != self.cfg.context {
            return Err(Error::Shape(format!(
                "context of {} ids for a model with k={}",
                context.len(),
                self.cfg.context
            )));
        }
        self.check_ids(context)?;
        let mut ws = Workspace::new(&self.cfg);
        self.forward(context, &mut ws);
        Ok(ws.logits)
    }

    /// Mean negative log-likelihood over positions `1..L` of one sequence.
    pub fn nll_loss(&self, seq: &[u32]) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::Shape("sequence needs at least 2 tokens".into()));
        }
        self.check_ids(seq)?;
        let mut ws = Workspace::new(&self.cfg);
        Ok(self.sequence_nll_mean(seq, &mut ws))
    }

    /// Mean loss over a batch of equal-length sequences and its gradient.
    pub fn loss_and_grad<S: AsRef<[u32]> + Sync>(&self, batch: &[S]) -> Result<(f64, ModelParams)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient of an empty batch".into()));
        }
        let len = batch[0].as_ref().len();
        if len < 2 {
            return Err(Error::Shape("sequence needs at least 2 tokens".into()));
        }
        for s in batch {
            if s.as_ref().len() != len {
                return Err(Error::Shape("batch sequences differ in length".into()));
            }
            self.check_ids(s.as_ref())?;
        }
        let positions = (batch.len() * (len - 1)) as f64;
        let parts: Vec<(f64, ModelParams)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = self.zeroed_like();
                let mut ws = Workspace::new(&self.cfg);
                let mut loss = 0.0;
                for s in chunk {
                    loss += self.sequence_backward(s.as_ref(), &mut ws, &mut g);
                }
                (loss, g)
            })
            .collect();
        let (loss, mut grad) = tree_reduce(parts);
        grad.scale(1.0 / positions);
        Ok((loss / positions, grad))
    }

    pub fn grad<S: AsRef<[u32]> + Sync>(&self, batch: &[S]) -> Result<ModelParams> {
        self.loss_and_grad(batch).map(|(_, g)| g)
    }

    fn context_at(&self, seq: &[u32], i: usize, ctx: &mut [u32]) {
        let k = self.cfg.context;
        for (j, c) in ctx.iter_mut().enumerate() {
            // slot j holds token i - k + j
            *c = if i + j >= k {
                seq[i + j - k]
            } else {
                self.cfg.sep_id
            };
        }
    }

    /// Leaves `x`, `hidden` and `logits` (as log-probabilities) in `ws`.
    fn forward(&self, ctx: &[u32], ws: &mut Workspace) {
        let d = self.cfg.embed_dim;
        for (j, &id) in ctx.iter().enumerate() {
            ws.x[j * d..(j + 1) * d].copy_from_slice(self.embedding.row(id as usize));
        }
        ws.hidden.copy_from_slice(&self.b1);
        for (r, &xr) in ws.x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (a, &w) in ws.hidden.iter_mut().zip(self.w1.row(r)) {
                *a += xr * w;
            }
        }
        for a in ws.hidden.iter_mut() {
            *a = a.tanh();
        }
        let mut max = f64::NEG_INFINITY;
        for (v, l) in ws.logits.iter_mut().enumerate() {
            *l = self.b2[v] + dot(self.output.row(v), &ws.hidden);
            max = max.max(*l);
        }
        let sum: f64 = ws.logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        for l in ws.logits.iter_mut() {
            *l -= lse;
        }
    }

    /// Running mean, which is exact when every term is equal.
    fn sequence_nll_mean(&self, seq: &[u32], ws: &mut Workspace) -> f64 {
        let mut ctx = vec![0u32; self.cfg.context];
        let mut mean = 0.0;
        for i in 1..seq.len() {
            self.context_at(seq, i, &mut ctx);
            self.forward(&ctx, ws);
            let x = -ws.logits[seq[i] as usize];
            mean += (x - mean) / i as f64;
        }
        mean
    }

    /// Per-sequence mean NLL for every sequence of a set, in order.
    pub fn sequence_losses<'a>(&self, seqs: impl IntoIterator<Item = &'a [u32]>) -> Result<Vec<f64>> {
        let seqs: Vec<&[u32]> = seqs.into_iter().collect();
        for s in &seqs {
            if s.len() < 2 {
                return Err(Error::Shape("sequence needs at least 2 tokens".into()));
            }
            self.check_ids(s)?;
        }
        Ok(seqs
            .par_iter()
            .map_init(
                || Workspace::new(&self.cfg),
                |ws, s| self.sequence_nll_mean(s, ws),
            )
            .collect())
    }

    /// Adds the unscaled gradient of the summed NLL of `seq` into `g`.
    fn sequence_backward(&self, seq: &[u32], ws: &mut Workspace, g: &mut ModelParams) -> f64 {
        let (d, h) = (self.cfg.embed_dim, self.cfg.hidden_dim);
        let mut ctx = vec![0u32; self.cfg.context];
        let mut total = 0.0;
        for i in 1..seq.len() {
            self.context_at(seq, i, &mut ctx);
            self.forward(&ctx, ws);
            let y = seq[i] as usize;
            total -= ws.logits[y];

            // dlogits = softmax - onehot
            ws.dhidden.fill(0.0);
            for v in 0..ws.logits.len() {
                let mut dl = ws.logits[v].exp();
                if v == y {
                    dl -= 1.0;
                }
                g.b2[v] += dl;
                for ((go, &hv), (dh, &ov)) in g
                    .output
                    .row_mut(v)
                    .iter_mut()
                    .zip(&ws.hidden)
                    .zip(ws.dhidden.iter_mut().zip(self.output.row(v)))
                {
                    *go += dl * hv;
                    *dh += dl * ov;
                }
            }
            for (dp, &hv) in ws.dhidden.iter_mut().zip(&ws.hidden) {
                *dp *= 1.0 - hv * hv;
            }
            for (gb, &dp) in g.b1.iter_mut().zip(&ws.dhidden) {
                *gb += dp;
            }
            for r in 0..ws.x.len() {
                let xr = ws.x[r];
                let grow = g.w1.row_mut(r);
                for (gw, &dp) in grow.iter_mut().zip(&ws.dhidden) {
                    *gw += xr * dp;
                }
                ws.dx[r] = dot(self.w1.row(r), &ws.dhidden);
            }
            for (j, &id) in ctx.iter().enumerate() {
                for (ge, &dx) in g
                    .embedding
                    .row_mut(id as usize)
                    .iter_mut()
                    .zip(&ws.dx[j * d..(j + 1) * d])
                {
                    *ge += dx;
                }
            }
            debug_assert_eq!(ws.dhidden.len(), h);
        }
        total
    }

    /// Appends rows for `new_tokens` to the embedding, output matrix and
    /// output bias, each the mean of its base-tokenization rows.
    pub fn extend_vocab<S: AsRef<[u8]>>(
        &self,
        base: &Vocab,
        new_tokens: &[S],
    ) -> Result<(ModelParams, vocab::Extension)> {
        if base.len() != self.cfg.vocab_size {
            return Err(Error::Shape(format!(
                "model has {} tokens, vocab has {}",
                self.cfg.vocab_size,
                base.len()
            )));
        }
        let ext = base.extend(new_tokens)?;
        let me = vocab::extend_model_vocab(&self.embedding, &self.output, base, &ext.appended)?;
        let bias = Matrix::from_vec(self.b2.len(), 1, self.b2.clone())?;
        let bias = vocab::mean_init_rows(&bias, base, &ext.appended)?;
        let mut cfg = self.cfg;
        cfg.vocab_size = ext.vocab.len();
        Ok((
            ModelParams {
                cfg,
                embedding: me.embedding,
                w1: self.w1.clone(),
                b1: self.b1.clone(),
                output: me.output,
                b2: bias.as_slice().to_vec(),
            },
            ext,
        ))
    }
}

/// Sums partial results pairwise: (0+1), (2+3), ... then again on the sums.
fn tree_reduce(mut parts: Vec<(f64, ModelParams)>) -> (f64, ModelParams) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((la, mut ga)) = it.next() {
            match it.next() {
                Some((lb, gb)) => {
                    ga.add_assign(&gb);
                    next.push((la + lb, ga));
                }
                None => next.push((la, ga)),
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Workspace {
    x: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
    dx: Vec<f64>,
}

impl Workspace {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            x: vec![0.0; cfg.context * cfg.embed_dim],
            hidden: vec![0.0; cfg.hidden_dim],
            logits: vec![0.0; cfg.vocab_size],
            dhidden: vec![0.0; cfg.hidden_dim],
            dx: vec![0.0; cfg.context * cfg.embed_dim],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(v: usize, k: usize, d: usize, h: usize) -> ModelConfig {
        ModelConfig {
            context: k,
            embed_dim: d,
            hidden_dim: h,
            vocab_size: v,
            sep_id: 0,
        }
    }

    /// Gaussian-free random params with larger scale so curvature shows up.
    fn random_params(cfg: ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::zeros(cfg).unwrap();
        let mut rng = Stream::new(seed);
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v = rng.next_f64() - 0.5;
            }
        }
        p
    }

    #[test]
    fn zero_params_uniform() {
        let p = ModelParams::zeros(small_cfg(7, 3, 2, 2)).unwrap();
        let lp = p.log_probs(&[1, 2, 3]).unwrap();
        for v in lp {
            assert_eq!(v, -(7f64.ln()));
            assert!((v - (1.0f64 / 7.0).ln()).abs() < 1e-15);
        }
        let loss = p.nll_loss(&[1, 2, 3, 4, 5, 6, 0]).unwrap();
        assert_eq!(loss, 7f64.ln());
    }

    #[test]
    fn hand_computed_two_token_softmax() {
        // |V|=2, k=1, d=1, h=1
        let mut p = ModelParams::zeros(small_cfg(2, 1, 1, 1)).unwrap();
        p.embedding = Matrix::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        p.w1 = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        p.b1 = vec![0.1];
        p.output = Matrix::from_vec(2, 1, vec![1.5, -0.5]).unwrap();
        p.b2 = vec![0.2, 0.0];
        let hidden = (0.5f64 * 2.0 + 0.1).tanh();
        let l0 = 1.5 * hidden + 0.2;
        let l1 = -0.5 * hidden;
        let z = l0.exp() + l1.exp();
        let lp = p.log_probs(&[0]).unwrap();
        assert!((lp[0] - (l0.exp() / z).ln()).abs() < 1e-14);
        assert!((lp[1] - (l1.exp() / z).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_probs_normalized_and_checked() {
        let p = random_params(small_cfg(13, 2, 3, 4), 1);
        let lp = p.log_probs(&[4, 12]).unwrap();
        assert!(lp.iter().all(|&v| v <= 0.0));
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(p.log_probs(&[4, 13]), Err(Error::TokenRange { id: 13, .. })));
        assert!(p.log_probs(&[4]).is_err());
    }

    #[test]
    fn context_left_pads_with_separator() {
        let mut p = ModelParams::zeros(ModelConfig {
            sep_id: 2,
            ..small_cfg(5, 3, 1, 1)
        })
        .unwrap();
        p.embedding = Matrix::from_fn(5, 1, |r, _| r as f64);
        let mut ctx = [0u32; 3];
        p.context_at(&[4, 3, 1, 0], 1, &mut ctx);
        assert_eq!(ctx, [2, 2, 4]);
        p.context_at(&[4, 3, 1, 0], 3, &mut ctx);
        assert_eq!(ctx, [4, 3, 1]);
        p.b1 = vec![0.0];
        assert!(p.nll_loss(&[1]).is_err());
    }

    #[test]
    fn finite_difference_gradient() {
        let p = random_params(small_cfg(20, 2, 4, 5), 3);
        let batch = vec![vec![1u32, 5, 19, 3, 3, 7], vec![0, 2, 4, 6, 8, 10]];
        let (_, g) = p.loss_and_grad(&batch).unwrap();
        let loss = |q: &ModelParams| {
            batch.iter().map(|s| q.nll_loss(s).unwrap()).sum::<f64>() / batch.len() as f64
        };
        let eps = 1e-4;
        let mut worst = 0.0f64;
        for t in 0..5 {
            for i in 0..p.slices()[t].len() {
                let mut plus = p.clone();
                plus.slices_mut()[t][i] += eps;
                let mut minus = p.clone();
                minus.slices_mut()[t][i] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = g.slices()[t][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                if fd.abs().max(an.abs()) > 1e-10 {
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn absent_ids_have_zero_embedding_grad() {
        let p = random_params(small_cfg(10, 2, 3, 3), 4);
        let g = p.grad(&[vec![1u32, 2, 3, 1]]).unwrap();
        for id in [4usize, 5, 6, 7, 8, 9] {
            assert!(g.embedding.row(id).iter().all(|&v| v == 0.0));
        }
        // sep_id 0 pads the context and so does receive gradient
        assert!(g.embedding.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = random_params(small_cfg(10, 2, 3, 3), 5);
        let b = vec![vec![1u32, 2, 3, 4], vec![5, 6, 7, 8]];
        let b2: Vec<_> = b.iter().chain(&b).cloned().collect();
        let (la, ga) = p.loss_and_grad(&b).unwrap();
        let (lb, gb) = p.loss_and_grad(&b2).unwrap();
        assert!((la - lb).abs() < 1e-14);
        for (x, y) in ga.slices().iter().zip(gb.slices()) {
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_independent_of_thread_count() {
        let p = random_params(small_cfg(12, 2, 3, 4), 6);
        let batch: Vec<Vec<u32>> = (0..11)
            .map(|i| (0..9).map(|j| ((i * 7 + j * 3) % 12) as u32).collect())
            .collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| p.loss_and_grad(&batch).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn relabeling_ids_preserves_loss() {
        let v = 9;
        let p = random_params(small_cfg(v, 2, 3, 4), 7);
        let perm: Vec<u32> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let mut q = p.clone();
        for old in 0..v {
            let new = perm[old] as usize;
            q.embedding.row_mut(new).copy_from_slice(p.embedding.row(old));
            q.output.row_mut(new).copy_from_slice(p.output.row(old));
            q.b2[new] = p.b2[old];
        }
        q.cfg.sep_id = perm[p.cfg.sep_id as usize];
        let seq = [1u32, 4, 4, 2, 8, 0, 3];
        let mapped: Vec<u32> = seq.iter().map(|&t| perm[t as usize]).collect();
        let a = p.nll_loss(&seq).unwrap();
        let b = q.nll_loss(&mapped).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_cfg(30, 2, 4, 4);
        let a = ModelParams::init(cfg, 1).unwrap();
        assert_eq!(a, ModelParams::init(cfg, 1).unwrap());
        assert_ne!(a, ModelParams::init(cfg, 2).unwrap());
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        let n = a.embedding.as_slice().len() as f64;
        let var = a.embedding.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02).abs() < 0.005);
    }

    #[test]
    fn extension_keeps_old_rows() {
        let base = Vocab::base();
        let cfg = ModelConfig {
            context: 2,
            embed_dim: 3,
            hidden_dim: 3,
            vocab_size: base.len(),
            sep_id: 256,
        };
        let p = ModelParams::init(cfg, 9).unwrap();
        let (q, ext) = p.extend_vocab(&base, &["\u{4e00}", "\u{4e01}"]).unwrap();
        assert_eq!(ext.appended.len(), 2);
        assert_eq!(q.cfg.vocab_size, 260);
        for r in 0..base.len() {
            assert_eq!(q.embedding.row(r), p.embedding.row(r));
            assert_eq!(q.output.row(r), p.output.row(r));
        }
        let pieces = base.tokenize("\u{4e00}");
        let mean: f64 = pieces.iter().map(|&i| p.b2[i as usize]).sum::<f64>() / 3.0;
        assert_eq!(q.b2[258], mean);
        assert!(p.extend_vocab(&Vocab::with_bytes::<&str>(&[]).unwrap(), &["x"]).is_err());
    }
}
