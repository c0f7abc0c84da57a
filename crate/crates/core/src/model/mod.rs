//! The multimodal MIL network: encoders, per-modality pooling, gated fusion,
//! and a linear-softmax output over three classes.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Bag, Class, Modality};
use crate::encoder::{BoundEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundLinear, Linear, Parameters};
use crate::pooling::{
    attention_pool, attention_scores, relevance_renormalize, sa_loss, supervised_attention_pool,
    AttentionModule, BoundAttention,
};

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[frames, height, width]` of cine instances.
    pub cine_shape: Vec<usize>,
    /// `[height, width]` of doppler instances.
    pub doppler_shape: Vec<usize>,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Hidden width of every attention module.
    pub attention_dim: usize,
    pub activation: Activation,
    pub use_cine: bool,
    pub use_doppler: bool,
    /// Weight of the supervised-attention term.
    pub lambda: f64,
    /// Temperature applied to relevance scores.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cine_shape: vec![4, 8, 8],
            doppler_shape: vec![12, 16],
            embed_dim: 32,
            hidden_sizes: vec![64],
            attention_dim: 32,
            activation: Activation::Tanh,
            use_cine: true,
            use_doppler: true,
            lambda: 10.0,
            tau: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_cine && !self.use_doppler {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.embed_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("embed_dim and attention_dim must be positive".into()));
        }
        self.encoder_config(Modality::Cine).validate()?;
        self.encoder_config(Modality::Doppler).validate()
    }

    pub fn encoder_config(&self, modality: Modality) -> EncoderConfig {
        EncoderConfig {
            modality,
            input_shape: match modality {
                Modality::Cine => self.cine_shape.clone(),
                Modality::Doppler => self.doppler_shape.clone(),
            },
            hidden_sizes: self.hidden_sizes.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }
}

/// Which branches a forward pass actually used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPath {
    Both,
    CineOnly,
    DopplerOnly,
}

#[derive(Clone, Debug)]
pub struct MMILModel {
    config: ModelConfig,
    pub cine_encoder: Encoder,
    pub doppler_encoder: Encoder,
    /// Supervised cine branch (`A`).
    pub att_a: AttentionModule,
    /// Free cine branch (`B`).
    pub att_b: AttentionModule,
    pub att_doppler: AttentionModule,
    /// Gate scorer shared by both modality representations.
    pub att_fusion: AttentionModule,
    /// Output layer, weight `[3, M]`, bias `[3]`.
    pub output: Linear,
}

impl PartialEq for MMILModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.flat_params() == other.flat_params()
    }
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    cine_encoder: BoundEncoder,
    doppler_encoder: BoundEncoder,
    att_a: BoundAttention,
    att_b: BoundAttention,
    att_doppler: BoundAttention,
    att_fusion: BoundAttention,
    output: BoundLinear,
    /// Parameter variables in [`Parameters::visit`] order.
    pub params: Vec<Var>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
    pub embedding: Var,
    pub alpha: f64,
    pub path: BranchPath,
    pub cine_weights: Option<Var>,
    pub cine_attention: Option<Var>,
    pub doppler_weights: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub probs: [f64; 3],
    pub study_embedding: Vec<f64>,
    /// Weight on the cine representation: 1 for cine-only, 0 for doppler-only.
    pub alpha: f64,
    pub path: BranchPath,
    /// Combined cine weights `c`.
    pub cine_weights: Option<Vec<f64>>,
    /// Supervised cine attention `A`.
    pub cine_attention: Option<Vec<f64>>,
    pub doppler_weights: Option<Vec<f64>>,
}

/// Gated fusion `s = alpha z + (1 - alpha) z~` with
/// `alpha = eta(z) / (eta(z) + eta(z~))`, `eta(v) = exp(w^T tanh(U v))`.
///
/// Computed as `alpha = sigmoid(score(z) - score(z~))`, which is the same
/// quantity without overflow. Returns `(s, alpha)` with `alpha` of shape `[1]`.
pub fn fuse(tape: &mut Tape, z: Var, z_doppler: Var, att_fusion: BoundAttention) -> Result<(Var, Var)> {
    if tape.shape(z) != tape.shape(z_doppler) || tape.shape(z).len() != 1 {
        return Err(Error::dim("fuse", tape.shape(z), tape.shape(z_doppler)));
    }
    let m = tape.shape(z)[0];
    let z_row = tape.reshape(z, &[1, m])?;
    let zd_row = tape.reshape(z_doppler, &[1, m])?;
    let score_z = attention_scores(tape, att_fusion, z_row)?;
    let score_zd = attention_scores(tape, att_fusion, zd_row)?;
    let logit = tape.sub(score_z, score_zd)?;
    let alpha = tape.sigmoid(logit);
    let diff = tape.sub(z, z_doppler)?;
    let shifted = tape.scale(diff, alpha)?;
    let s = tape.add(z_doppler, shifted)?;
    Ok((s, alpha))
}

impl MMILModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, l) = (config.embed_dim, config.attention_dim);
        Ok(MMILModel {
            cine_encoder: Encoder::init_with(config.encoder_config(Modality::Cine), &mut rng)?,
            doppler_encoder: Encoder::init_with(config.encoder_config(Modality::Doppler), &mut rng)?,
            att_a: AttentionModule::init_with(m, l, &mut rng),
            att_b: AttentionModule::init_with(m, l, &mut rng),
            att_doppler: AttentionModule::init_with(m, l, &mut rng),
            att_fusion: AttentionModule::init_with(m, l, &mut rng),
            output: Linear::init(&mut rng, m, Class::COUNT),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the loss weighting or ablation switches without touching weights.
    pub fn set_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        if config.encoder_config(Modality::Cine) != self.config.encoder_config(Modality::Cine)
            || config.encoder_config(Modality::Doppler) != self.config.encoder_config(Modality::Doppler)
            || config.attention_dim != self.config.attention_dim
        {
            return Err(Error::Config("architecture fields cannot change on a built model".into()));
        }
        self.config = config;
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut params = Vec::new();
        let cine_encoder = self.cine_encoder.bind(tape, &mut params);
        let doppler_encoder = self.doppler_encoder.bind(tape, &mut params);
        let att_a = self.att_a.bind(tape, &mut params);
        let att_b = self.att_b.bind(tape, &mut params);
        let att_doppler = self.att_doppler.bind(tape, &mut params);
        let att_fusion = self.att_fusion.bind(tape, &mut params);
        let output = self.output.bind(tape, &mut params);
        BoundModel {
            cine_encoder,
            doppler_encoder,
            att_a,
            att_b,
            att_doppler,
            att_fusion,
            output,
            params,
        }
    }

    /// Branches this bag will use, after the degenerate-bag fallback.
    pub fn branch_path(&self, bag: &Bag) -> Result<BranchPath> {
        let cine = self.config.use_cine && !bag.cine.is_empty();
        let doppler = self.config.use_doppler && !bag.doppler.is_empty();
        let path = match (cine, doppler) {
            (true, true) => BranchPath::Both,
            (true, false) => BranchPath::CineOnly,
            (false, true) => BranchPath::DopplerOnly,
            (false, false) => return Err(Error::EmptyBag(bag.id.clone())),
        };
        let wanted_both = self.config.use_cine && self.config.use_doppler;
        if wanted_both && path != BranchPath::Both {
            log::debug!("bag {}: one modality empty, falling back to {path:?}", bag.id);
        }
        Ok(path)
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundModel, bag: &Bag) -> Result<TapeForward> {
        let path = self.branch_path(bag)?;
        let mut cine_weights = None;
        let mut cine_attention = None;
        let mut doppler_weights = None;

        let z = if path != BranchPath::DopplerOnly {
            let h = self.cine_encoder.encode_batch(tape, &bound.cine_encoder, &bag.cine)?;
            let (pooled, a) = supervised_attention_pool(tape, bound.att_a, bound.att_b, h)?;
            cine_weights = Some(pooled.weights);
            cine_attention = Some(a);
            Some(pooled.representation)
        } else {
            None
        };
        let z_doppler = if path != BranchPath::CineOnly {
            let h = self.doppler_encoder.encode_batch(tape, &bound.doppler_encoder, &bag.doppler)?;
            let pooled = attention_pool(tape, bound.att_doppler, h)?;
            doppler_weights = Some(pooled.weights);
            Some(pooled.representation)
        } else {
            None
        };

        let (embedding, alpha) = match (z, z_doppler) {
            (Some(z), Some(zd)) => {
                let (s, alpha) = fuse(tape, z, zd, bound.att_fusion)?;
                (s, tape.value(alpha).item())
            }
            (Some(z), None) => (z, 1.0),
            (None, Some(zd)) => (zd, 0.0),
            (None, None) => unreachable!("branch_path rejects empty bags"),
        };

        let m = self.config.embed_dim;
        let row = tape.reshape(embedding, &[1, m])?;
        let out = bound.output.forward(tape, row)?;
        let logits = tape.reshape(out, &[Class::COUNT])?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(TapeForward {
            logits,
            probs,
            log_probs,
            embedding,
            alpha,
            path,
            cine_weights,
            cine_attention,
            doppler_weights,
        })
    }

    /// Cross-entropy plus `lambda * KL(R || A)`; the KL term is dropped when
    /// the cine branch is unused or `lambda == 0`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        bag: &Bag,
        label: Class,
    ) -> Result<(Var, TapeForward)> {
        let fwd = self.forward_on_tape(tape, bound, bag)?;
        let picked = tape.pick(fwd.log_probs, label.index())?;
        let ce = tape.neg(picked);
        let loss = match fwd.cine_attention {
            Some(a) if self.config.lambda > 0.0 => {
                let raw = bag.cine_relevance().ok_or_else(|| Error::Data {
                    bag: bag.id.clone(),
                    detail: "cine instances lack relevance scores required by the attention loss".into(),
                })?;
                let r = relevance_renormalize(&raw, self.config.tau)?;
                let r = tape.constant(r);
                let kl = sa_loss(tape, r, a)?;
                let weighted = tape.scalar_mul(kl, self.config.lambda);
                tape.add(ce, weighted)?
            }
            _ => ce,
        };
        Ok((loss, fwd))
    }

    fn read_output(tape: &Tape, fwd: &TapeForward) -> ForwardOutput {
        let p = tape.value(fwd.probs).data();
        let vec_of = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
        ForwardOutput {
            probs: [p[0], p[1], p[2]],
            study_embedding: tape.value(fwd.embedding).data().to_vec(),
            alpha: fwd.alpha,
            path: fwd.path,
            cine_weights: vec_of(fwd.cine_weights),
            cine_attention: vec_of(fwd.cine_attention),
            doppler_weights: vec_of(fwd.doppler_weights),
        }
    }

    pub fn forward(&self, bag: &Bag) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fwd = self.forward_on_tape(&mut tape, &bound, bag)?;
        Ok(Self::read_output(&tape, &fwd))
    }

    pub fn total_loss(&self, bag: &Bag, label: Class) -> Result<(f64, ForwardOutput)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, fwd) = self.loss_on_tape(&mut tape, &bound, bag, label)?;
        Ok((tape.value(loss).item(), Self::read_output(&tape, &fwd)))
    }

    /// Loss, forward output, and gradients in [`Parameters::visit`] order.
    pub fn loss_and_gradients(&self, bag: &Bag, label: Class) -> Result<(f64, ForwardOutput, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, fwd) = self.loss_on_tape(&mut tape, &bound, bag, label)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value} on bag {}", bag.id)));
        }
        let grads = tape.backward(loss)?;
        let grads = bound.params.iter().map(|&v| grads.get(v)).collect();
        Ok((value, Self::read_output(&tape, &fwd), grads))
    }
}

impl Parameters for MMILModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        use crate::nn::join;
        self.cine_encoder.visit(&join(prefix, "cine_encoder"), f);
        self.doppler_encoder.visit(&join(prefix, "doppler_encoder"), f);
        self.att_a.visit(&join(prefix, "att_a"), f);
        self.att_b.visit(&join(prefix, "att_b"), f);
        self.att_doppler.visit(&join(prefix, "att_doppler"), f);
        self.att_fusion.visit(&join(prefix, "att_fusion"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        use crate::nn::join;
        self.cine_encoder.visit_mut(&join(prefix, "cine_encoder"), f);
        self.doppler_encoder.visit_mut(&join(prefix, "doppler_encoder"), f);
        self.att_a.visit_mut(&join(prefix, "att_a"), f);
        self.att_b.visit_mut(&join(prefix, "att_b"), f);
        self.att_doppler.visit_mut(&join(prefix, "att_doppler"), f);
        self.att_fusion.visit_mut(&join(prefix, "att_fusion"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
