//! Fully connected networks, the six-network model bundle, and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, ParamKey, Var};
use crate::error::{Error, Result};
use crate::lie_group::{so_dim, LatentPoint, Rotation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Swish,
}

/// What the last linear layer feeds into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    L2Normalize,
    /// Output read as so(n) coordinates and sent through the Cayley map;
    /// each output row is a flattened `n×n` rotation.
    SkewToRotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

/// Inverse of `so_dim`, if `m` is a triangular number.
fn ambient_dim(m: usize) -> Option<usize> {
    (2..=m + 1).find(|&n| so_dim(n) == m)
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, head: Head) -> Self {
        MlpSpec {
            widths,
            activation,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        if self.head == Head::SkewToRotation && ambient_dim(self.out_width()).is_none() {
            return Err(Error::Config(format!(
                "rotation head needs n(n-1)/2 outputs, got {}",
                self.out_width()
            )));
        }
        Ok(())
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Width of what `forward` returns (n² for the rotation head).
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::SkewToRotation => {
                let n = ambient_dim(self.out_width()).expect("validated");
                n * n
            }
            _ => self.out_width(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    owner: u32,
    /// Weight, bias, weight, bias, … with layers computing `xW + b`.
    params: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn build(spec: MlpSpec, owner: u32, seed: u64) -> Result<Mlp> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * (spec.widths.len() - 1));
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            params.push(Tensor::from_vec(fan_in, fan_out, data)?);
            params.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp {
            spec,
            owner,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces all parameters, checking shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim("set_params", self.params.len(), params.len()));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::dim(
                    "set_params",
                    format!("{:?}", old.shape()),
                    format!("{:?}", new.shape()),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            owner: self.owner,
            index: index as u32,
        }
    }

    /// Records the network on `g`. Frozen networks enter as constants, so
    /// no gradient can reach them.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.spec.in_width() {
            return Err(Error::dim("mlp input", self.spec.in_width(), width));
        }
        let layers = self.params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let (w, b) = if trainable {
                (
                    g.param(self.key(2 * l), &self.params[2 * l]),
                    g.param(self.key(2 * l + 1), &self.params[2 * l + 1]),
                )
            } else {
                (
                    g.constant(self.params[2 * l].clone()),
                    g.constant(self.params[2 * l + 1].clone()),
                )
            };
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                    Activation::Swish => g.swish(h),
                };
            }
        }
        match self.spec.head {
            Head::Linear => Ok(h),
            Head::L2Normalize => g.l2_normalize(h),
            Head::SkewToRotation => {
                let n = ambient_dim(self.spec.out_width()).expect("validated");
                g.cayley_rows(h, n)
            }
        }
    }

    /// Forward pass outside any training graph.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }

    /// Gradients for every parameter, zero where the graph never used one.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                grads
                    .param(self.key(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    }

    /// SHA-256 over the raw parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort before
    /// any parameter is touched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam", self.m.len(), format!("{}/{}", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{:?}", self.m[i].shape()),
                    format!("{:?}/{:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    stage: "adam".into(),
                    epoch: 0,
                    step: self.step as usize,
                    detail: format!("gradient of parameter {i} is not finite"),
                    trace: Vec::new(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Network tags used as [`ParamKey::owner`].
pub mod owner {
    pub const ENCODER: u32 = 0;
    pub const DECODER: u32 = 1;
    pub const TAU: u32 = 2;
    pub const B: u32 = 3;
    pub const PSI: u32 = 4;
    pub const HEAD: u32 = 5;
    pub const ADVERSARY: u32 = 6;
}

/// Sizes shared by the six networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input feature width.
    pub d: usize,
    /// Sphere ambient dimension.
    pub n: usize,
    pub hidden: usize,
    pub activation: Activation,
}

/// Encoder 𝔈, decoder 𝔇, τ, b, Ψ and the prediction head h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub tau: Mlp,
    pub b: Mlp,
    pub psi: Mlp,
    pub head: Mlp,
}

impl ModelBundle {
    pub fn build(dims: ModelDims, seed: u64) -> Result<ModelBundle> {
        let ModelDims {
            d,
            n,
            hidden: h,
            activation: act,
        } = dims;
        if n < 2 {
            return Err(Error::Config(format!("sphere dimension n must be at least 2, got {n}")));
        }
        let net = |widths: Vec<usize>, head, tag: u32| {
            Mlp::build(MlpSpec::new(widths, act, head), tag, seed.wrapping_mul(31).wrapping_add(tag as u64))
        };
        Ok(ModelBundle {
            dims,
            encoder: net(vec![d, h, n], Head::L2Normalize, owner::ENCODER)?,
            decoder: net(vec![n, h, d], Head::Linear, owner::DECODER)?,
            tau: net(vec![n, h, so_dim(n)], Head::SkewToRotation, owner::TAU)?,
            b: net(vec![n, h, n], Head::Linear, owner::B)?,
            psi: net(vec![n, h, n], Head::L2Normalize, owner::PSI)?,
            head: net(vec![n, h, 1], Head::Linear, owner::HEAD)?,
        })
    }

    pub fn networks(&self) -> [(&'static str, &Mlp); 6] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("tau", &self.tau),
            ("b", &self.b),
            ("psi", &self.psi),
            ("head", &self.head),
        ]
    }

    /// Latents ℓ = 𝔈(X), one per row.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.eval(x)
    }

    /// τ(ℓ) for every latent row, flattened row-major.
    pub fn tau_rows(&self, latents: &Tensor) -> Result<Tensor> {
        self.tau.eval(latents)
    }

    /// Codes Φ(ℓ) for every latent row.
    pub fn phi_rows(&self, latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let l = g.constant(latents.clone());
        let out = crate::losses::phi(&mut g, l, &self.tau, &self.b, false, false)?;
        Ok(g.value(out).clone())
    }

    /// Raw head outputs h(Φ) for every code row.
    pub fn predict_raw(&self, codes: &Tensor) -> Result<Tensor> {
        self.head.eval(codes)
    }
}

/// τ(ℓ) for a single latent point.
pub fn tau_forward(tau: &Mlp, l: &LatentPoint) -> Result<Rotation> {
    let out = tau.eval(&Tensor::row(l.as_slice().to_vec()))?;
    let n = l.dim();
    Rotation::with_tolerance(Tensor::from_vec(n, n, out.into_data())?, 1e-6)
}
