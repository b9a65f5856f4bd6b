//! MLP encoder/projector pair exchanged between clients and the server.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_INIT};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{self, Tensor};

/// Fully connected layer computing `x · weight + bias`; `weight` is `[in × out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.dims2();
        if weight.shape().len() != 2 || bias.numel() != out {
            return Err(Error::Dimension {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(input, output, weight).expect("sized"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims2().0
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims2().1
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpVars(Vec<(Var, Var)>);

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension {
                    op: "mlp",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param("model dims", "at least two positive layer widths"));
        }
        Self::new(dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.layers.iter().map(|l| [l.input_dim(), l.output_dim()]).collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        self.layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone().with_requires_grad(trainable))?;
                let b = tape.leaf(l.bias.clone().with_requires_grad(trainable))?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>>>()
            .map(MlpVars)
    }

    pub fn forward(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in vars.0.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_bias(h, *b)?;
            if i + 1 < vars.0.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradient-free forward pass; bitwise equal to [`Mlp::forward`] values.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = tensor::add_bias(&tensor::matmul(&h, &layer.weight)?, &layer.bias)?;
            if i + 1 < self.layers.len() {
                h = tensor::relu(&h);
            }
        }
        Ok(h)
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

impl MlpVars {
    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.0.iter().flat_map(|(w, b)| [*w, *b])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of the encoder.
    pub hidden: Vec<usize>,
    /// Encoder output width `d_z`; the projector maps it to `d_z / 2`.
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 || self.hidden.contains(&0) {
            return Err(Error::param(
                "model",
                "embedding_dim ≥ 2 and every hidden width ≥ 1",
            ));
        }
        Ok(())
    }
}

/// Encoder `θ_b` and projector `θ_h`, with the round index as `version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub encoder: Mlp,
    pub projector: Mlp,
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: MlpVars,
    pub projector: MlpVars,
}

impl ModelVars {
    /// Gradient flattened in parameter declaration order.
    pub fn flat_grad(&self, grads: &Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for v in self.encoder.vars().chain(self.projector.vars()) {
            let g = grads
                .wrt(v)
                .ok_or_else(|| Error::Contract("parameter is not a trainable leaf".into()))?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u64,
    encoder: Vec<[usize; 2]>,
    projector: Vec<[usize; 2]>,
    param_count: usize,
}

impl GlobalModel {
    pub fn new(encoder: Mlp, projector: Mlp) -> Result<Self> {
        if encoder.output_dim() != projector.input_dim() {
            return Err(Error::Dimension {
                op: "global_model",
                left: vec![encoder.output_dim()],
                right: vec![projector.input_dim()],
            });
        }
        Ok(Self {
            encoder,
            projector,
            version: 0,
        })
    }

    /// Randomly initialized model: encoder `input → hidden… → d_z`, projector
    /// `d_z → d_z → d_z/2`.
    pub fn init(input_dim: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[STREAM_INIT]);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.embedding_dim);
        let encoder = Mlp::random(&dims, &mut rng)?;
        let dz = config.embedding_dim;
        let projector = Mlp::random(&[dz, dz, (dz / 2).max(1)], &mut rng)?;
        Self::new(encoder, projector)
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ModelVars> {
        Ok(ModelVars {
            encoder: self.encoder.register(tape, true)?,
            projector: self.projector.register(tape, true)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.params().chain(self.projector.params()).map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.encoder.params().chain(self.projector.params()) {
            out.extend_from_slice(p.data());
        }
        out
    }

    /// `θ ← θ + scale · delta` over the flattened parameters.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "add_scaled",
                left: vec![self.param_count()],
                right: vec![delta.len()],
            });
        }
        let mut offset = 0;
        for p in self.encoder.params_mut().chain(self.projector.params_mut()) {
            let n = p.numel();
            for (v, d) in p.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *v += scale * d;
            }
            offset += n;
        }
        Ok(())
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "set_flat",
                left: vec![self.param_count()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for p in self.encoder.params_mut().chain(self.projector.params_mut()) {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Encoder forward of a single input vector, without a tape.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.encoder.input_dim() {
            return Err(Error::Dimension {
                op: "forward_encoder",
                left: vec![self.encoder.input_dim()],
                right: vec![x.len()],
            });
        }
        Ok(self.encoder.forward_values(&Tensor::vector(x.to_vec()))?.into_data())
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.projector.input_dim() {
            return Err(Error::Dimension {
                op: "forward_projector",
                left: vec![self.projector.input_dim()],
                right: vec![z.len()],
            });
        }
        Ok(self.projector.forward_values(&Tensor::vector(z.to_vec()))?.into_data())
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            version: self.version,
            encoder: self.encoder.shapes(),
            projector: self.projector.shapes(),
            param_count: self.param_count(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not newline-terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        let body = &bytes[split + 1..];
        if body.len() != header.param_count * 8 {
            return Err(Error::Format(format!(
                "checkpoint body holds {} bytes, expected {}",
                body.len(),
                header.param_count * 8
            )));
        }
        let build = |shapes: &[[usize; 2]]| {
            Mlp::new(
                shapes
                    .iter()
                    .map(|[i, o]| Linear {
                        weight: Tensor::zeros(&[*i, *o]),
                        bias: Tensor::zeros(&[*o]),
                    })
                    .collect(),
            )
        };
        let mut model = GlobalModel::new(build(&header.encoder)?, build(&header.projector)?)?;
        model.version = header.version;
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.set_flat(&flat)?;
        Ok(model)
    }
}
