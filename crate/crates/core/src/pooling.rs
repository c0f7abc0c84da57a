//! Attention pooling over instance embeddings.
//!
//! * [`attention_pool`]: weights `softmax(w^T tanh(U h_k))`, output `sum_k a_k h_k`.
//! * [`supervised_attention_pool`]: two such branches `A`, `B` combined as
//!   `c_k = a_k b_k / sum_j a_j b_j`. `A` is also returned so it can be pulled
//!   toward view-relevance targets by [`sa_loss`].
//! * [`sa_loss`]: `KL(R || A)` in nats with `R` held constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot, join, Parameters};

/// Scoring network `h -> w^T tanh(U h)` with `U: [L, M]`, `w: [L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModule {
    pub u: Tensor,
    pub w: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub u: Var,
    pub w: Var,
}

/// Pooled bag representation and the normalized weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledResult {
    pub representation: Tensor,
    pub weights: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PooledVars {
    pub representation: Var,
    pub weights: Var,
}

impl AttentionModule {
    pub fn new(u: Tensor, w: Tensor) -> Result<Self> {
        if u.shape().len() != 2 || w.shape() != [u.shape()[0]] {
            return Err(Error::dim("attention module", u.shape(), w.shape()));
        }
        Ok(AttentionModule { u, w })
    }

    pub fn init(embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        Self::init_with(embed_dim, hidden_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn init_with(embed_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionModule {
            u: glorot(rng, &[hidden_dim, embed_dim], embed_dim, hidden_dim),
            w: glorot(rng, &[hidden_dim], hidden_dim, 1),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, registry: &mut Vec<Var>) -> BoundAttention {
        let u = tape.param(self.u.clone());
        let w = tape.param(self.w.clone());
        registry.extend([u, w]);
        BoundAttention { u, w }
    }

    /// [`attention_pool`] on plain embeddings.
    pub fn pool(&self, embeddings: &[Tensor]) -> Result<PooledResult> {
        let mut tape = Tape::new();
        let att = self.bind(&mut tape, &mut Vec::new());
        let h = stack(&mut tape, embeddings)?;
        let out = attention_pool(&mut tape, att, h)?;
        Ok(PooledResult {
            representation: tape.value(out.representation).clone(),
            weights: tape.value(out.weights).clone(),
        })
    }
}

impl Parameters for AttentionModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "U"), &self.u);
        f(join(prefix, "w"), &self.w);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "U"), &mut self.u);
        f(join(prefix, "w"), &mut self.w);
    }
}

/// Constant `[K, M]` matrix from `K` embeddings of equal length.
pub fn stack(tape: &mut Tape, embeddings: &[Tensor]) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::Contract("attention pooling needs at least one instance".into()));
    }
    let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.data()).collect();
    Ok(tape.constant(Tensor::from_rows(&rows)?))
}

/// Unnormalized scores `w^T tanh(U h_k)` for each row of `h: [K, M]`, shape `[K]`.
pub fn attention_scores(tape: &mut Tape, att: BoundAttention, h: Var) -> Result<Var> {
    let (hs, us) = (tape.shape(h).to_vec(), tape.shape(att.u).to_vec());
    if hs.len() != 2 || us.len() != 2 || hs[1] != us[1] {
        return Err(Error::dim("attention_scores", &hs, &us));
    }
    let k = hs[0];
    let l = us[0];
    let ut = tape.transpose(att.u)?;
    let proj = tape.matmul(h, ut)?;
    let act = tape.tanh(proj);
    let w_col = tape.reshape(att.w, &[l, 1])?;
    let scores = tape.matmul(act, w_col)?;
    tape.reshape(scores, &[k])
}

/// `sum_k weights_k h_k` for `weights: [K]`, `h: [K, M]`, shape `[M]`.
pub fn weighted_sum(tape: &mut Tape, weights: Var, h: Var) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let k = tape.shape(weights).iter().product::<usize>();
    if hs.len() != 2 || hs[0] != k {
        return Err(Error::dim("weighted_sum", tape.shape(weights), &hs));
    }
    let row = tape.reshape(weights, &[1, k])?;
    let z = tape.matmul(row, h)?;
    tape.reshape(z, &[hs[1]])
}

pub fn attention_pool(tape: &mut Tape, att: BoundAttention, h: Var) -> Result<PooledVars> {
    let scores = attention_scores(tape, att, h)?;
    let weights = tape.softmax(scores)?;
    let representation = weighted_sum(tape, weights, h)?;
    Ok(PooledVars {
        representation,
        weights,
    })
}

/// Dual-branch pooling. Returns the combined pooling and the `A` weights.
pub fn supervised_attention_pool(
    tape: &mut Tape,
    att_a: BoundAttention,
    att_b: BoundAttention,
    h: Var,
) -> Result<(PooledVars, Var)> {
    let sa = attention_scores(tape, att_a, h)?;
    let a = tape.softmax(sa)?;
    let sb = attention_scores(tape, att_b, h)?;
    let b = tape.softmax(sb)?;
    let ab = tape.mul(a, b)?;
    let weights = tape.normalize(ab)?;
    let representation = weighted_sum(tape, weights, h)?;
    Ok((
        PooledVars {
            representation,
            weights,
        },
        a,
    ))
}

/// Relevance targets `softmax(raw / tau)`.
pub fn relevance_renormalize(raw: &[f64], tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if raw.is_empty() {
        return Err(Error::Contract("relevance list is empty".into()));
    }
    let scaled: Vec<f64> = raw.iter().map(|r| r / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
}

/// `KL(R || A) = sum_k r_k ln(r_k / a_k)`.
///
/// `r` passes through a stop-gradient, so only `a` receives gradient. Entries
/// of `r` must be positive (which `relevance_renormalize` guarantees).
pub fn sa_loss(tape: &mut Tape, r: Var, a: Var) -> Result<Var> {
    if tape.shape(r) != tape.shape(a) {
        return Err(Error::Contract(format!(
            "sa_loss length mismatch: R {:?} vs A {:?}",
            tape.shape(r),
            tape.shape(a)
        )));
    }
    let r = tape.stop_gradient(r);
    let log_r = tape.log(r)?;
    let log_a = tape.log(a)?;
    let diff = tape.sub(log_r, log_a)?;
    let terms = tape.mul(r, diff)?;
    Ok(tape.sum(terms))
}
