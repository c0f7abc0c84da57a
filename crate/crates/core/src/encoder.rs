//! Per-modality instance encoders.
//!
//! A cine frame stack is averaged over frames, flattened, and fed through an
//! MLP; a doppler image is flattened and fed through a separate MLP. Every
//! layer, including the last, applies the configured activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Instance, Modality};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, BoundLinear, Linear, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Cine: `[frames, height, width]`; doppler: `[height, width]`.
    pub input_shape: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let rank = match self.modality {
            Modality::Cine => 3,
            Modality::Doppler => 2,
        };
        if self.input_shape.len() != rank || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "{} encoder expects a positive rank-{rank} input shape, got {:?}",
                self.modality, self.input_shape
            )));
        }
        if self.embed_dim == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config("encoder layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the flattened vector entering the first layer.
    pub fn input_dim(&self) -> usize {
        match self.modality {
            Modality::Cine => self.input_shape[1..].iter().product(),
            Modality::Doppler => self.input_shape.iter().product(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    layers: Vec<BoundLinear>,
    activation: Activation,
}

impl Encoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub(crate) fn init_with(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim()];
        dims.extend(&config.hidden_sizes);
        dims.push(config.embed_dim);
        let layers = dims.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Ok(Encoder { config, layers })
    }

    /// Builds an encoder from explicit layers; shapes must chain from the
    /// input dimension to the embedding dimension.
    pub fn from_layers(config: EncoderConfig, layers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim()];
        dims.extend(&config.hidden_sizes);
        dims.push(config.embed_dim);
        if layers.len() + 1 != dims.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                dims.len() - 1,
                layers.len()
            )));
        }
        for (layer, w) in layers.iter().zip(dims.windows(2)) {
            if layer.in_dim() != w[0] || layer.out_dim() != w[1] || layer.bias.shape() != [w[1]] {
                return Err(Error::dim("encoder layer", layer.weight.shape(), &[w[1], w[0]]));
            }
        }
        Ok(Encoder { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn bind(&self, tape: &mut Tape, registry: &mut Vec<Var>) -> BoundEncoder {
        BoundEncoder {
            layers: self.layers.iter().map(|l| l.bind(tape, registry)).collect(),
            activation: self.config.activation,
        }
    }

    /// Flattened network input for one instance (frame mean for cine).
    pub fn prepare(&self, instance: &Instance) -> Result<Vec<f64>> {
        if instance.modality() != self.config.modality {
            return Err(Error::Contract(format!(
                "{} instance given to {} encoder",
                instance.modality(),
                self.config.modality
            )));
        }
        if instance.shape() != self.config.input_shape.as_slice() {
            return Err(Error::Contract(format!(
                "instance shape {:?} does not match encoder input {:?}",
                instance.shape(),
                self.config.input_shape
            )));
        }
        Ok(match self.config.modality {
            Modality::Doppler => instance.features().to_vec(),
            Modality::Cine => {
                let frames = self.config.input_shape[0];
                let len = self.config.input_dim();
                let mut mean = vec![0.0; len];
                for frame in instance.features().chunks_exact(len) {
                    mean.iter_mut().zip(frame).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= frames as f64);
                mean
            }
        })
    }

    /// Embeds a list of instances as the rows of a constant input matrix.
    pub fn encode_batch(&self, tape: &mut Tape, bound: &BoundEncoder, instances: &[Instance]) -> Result<Var> {
        if instances.is_empty() {
            return Err(Error::Contract("cannot encode an empty instance list".into()));
        }
        let rows = instances.iter().map(|i| self.prepare(i)).collect::<Result<Vec<_>>>()?;
        let x = tape.constant(Tensor::from_rows(&rows)?);
        bound.forward(tape, x)
    }

    /// Embedding of a single instance, shape `[embed_dim]`.
    pub fn encode(&self, instance: &Instance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &mut Vec::new());
        let h = self.encode_batch(&mut tape, &bound, std::slice::from_ref(instance))?;
        tape.value(h).reshaped(&[self.config.embed_dim])
    }
}

impl BoundEncoder {
    /// Runs the MLP over rows of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let pre = layer.forward(tape, h)?;
            h = self.activation.apply(tape, pre);
        }
        Ok(h)
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
