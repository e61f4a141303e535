//! The TIDE network: encoder, decoder and latent dynamics module, plus the
//! loss terms that train them.

mod loss;

pub use loss::{
    build_tide_loss, discrete_derivative, gaussian_log_likelihood, kl_to_standard_normal, minmax_normalize,
    reg_loss, reg_loss_node, tide_loss, LossBreakdown, LossGraph, WindowBatch,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

fn default_beta() -> f64 {
    1e-3
}
fn default_lambda1() -> f64 {
    0.1
}
fn default_lambda2() -> f64 {
    1e-2
}
fn default_lambda3() -> f64 {
    1.0
}
fn default_order() -> usize {
    4
}
fn default_omega() -> f64 {
    5.0
}
fn default_obs_variance() -> f64 {
    0.01
}

/// Loss weights and regularizer shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    /// KL weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the latent log-density of the predicted next latent.
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    /// Weight of the time-derivative regularizer.
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    /// Weight of the intermediate reconstruction in stage two.
    #[serde(default = "default_lambda3")]
    pub lambda3: f64,
    /// Highest derivative order penalized.
    #[serde(default = "default_order")]
    pub order: usize,
    /// Geometric weight per derivative order.
    #[serde(default = "default_omega")]
    pub omega: f64,
    /// Fixed variance of the Gaussian observation model.
    #[serde(default = "default_obs_variance")]
    pub obs_variance: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            lambda3: default_lambda3(),
            order: default_order(),
            omega: default_omega(),
            obs_variance: default_obs_variance(),
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.order == 0 {
            return Err(Error::Config("derivative order must be at least 1".into()));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be positive, got {}", self.omega)));
        }
        if !(self.obs_variance > 0.0 && self.obs_variance.is_finite()) {
            return Err(Error::Config(format!(
                "observation variance must be positive, got {}",
                self.obs_variance
            )));
        }
        Ok(())
    }
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![512, 256]
}
fn default_dynamics_width() -> usize {
    64
}

/// Layer sizes of a [`TideNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths of the encoder; the decoder uses them in reverse.
    #[serde(default = "default_encoder_hidden")]
    pub hidden: Vec<usize>,
    /// Width of the two hidden layers of the dynamics module.
    #[serde(default = "default_dynamics_width")]
    pub dynamics_width: usize,
    /// Decoder output size; equals `input_dim` unless set.
    #[serde(default)]
    pub output_dim: Option<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            hidden: default_encoder_hidden(),
            dynamics_width: default_dynamics_width(),
            output_dim: None,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim.unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.dynamics_width == 0 || self.output_dim() == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected tanh network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `(weight [in x out], bias [1 x out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                let weights = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                (
                    Tensor::matrix(fan_in, fan_out, weights).expect("sized"),
                    Tensor::zeros(&[1, fan_out]),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.cols())
    }

    /// Records the layer tensors as trainable leaves (or constants).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundMlp {
            layers: self.layers.iter().map(|(w, b)| (leaf(g, w), leaf(g, b))).collect(),
        }
    }

    /// Forward pass outside any training graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = bound.forward(&mut g, xi)?;
        Ok(g.value(out).clone())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }
}

/// Graph handles of an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Per-observation posterior: means and log-variances, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentGaussian {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return Err(Error::ShapeMismatch {
                op: "latent_gaussian",
                node: 0,
                detail: format!("mean {:?} vs logvar {:?}", mean.shape(), logvar.shape()),
            });
        }
        Ok(Self { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn variance(&self) -> Tensor {
        self.logvar.map(f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TideNet {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub dynamics: Mlp,
}

/// Graph handles of every [`TideNet`] parameter.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub dynamics: BoundMlp,
}

impl BoundNet {
    /// Parameter nodes in [`TideNet::parameters`] order.
    pub fn nodes(&self) -> Vec<NodeId> {
        self.encoder
            .nodes()
            .chain(self.decoder.nodes())
            .chain(self.dynamics.nodes())
            .collect()
    }

    /// Returns `(mean, clamped logvar)` nodes for a batch of inputs.
    pub fn encode(&self, g: &mut Graph, x: NodeId, latent: usize) -> Result<(NodeId, NodeId)> {
        let h = self.encoder.forward(g, x)?;
        let mean = g.slice_cols(h, 0, latent)?;
        let raw = g.slice_cols(h, latent, 2 * latent)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mean, logvar))
    }
}

impl TideNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = vec![arch.input_dim];
        enc.extend(&arch.hidden);
        enc.push(2 * arch.latent_dim);
        let mut dec = vec![arch.latent_dim];
        dec.extend(arch.hidden.iter().rev());
        dec.push(arch.output_dim());
        let w = arch.dynamics_width;
        let dynamics = [arch.latent_dim, w, w, arch.latent_dim];
        Ok(Self {
            encoder: Mlp::new(&enc, &mut rng),
            decoder: Mlp::new(&dec, &mut rng),
            dynamics: Mlp::new(&dynamics, &mut rng),
            arch,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.encoder
            .tensors()
            .chain(self.decoder.tensors())
            .chain(self.dynamics.tensors())
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .tensors_mut()
            .chain(self.decoder.tensors_mut())
            .chain(self.dynamics.tensors_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        BoundNet {
            encoder: self.encoder.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
            dynamics: self.dynamics.bind(g, trainable),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                node: 0,
                detail: format!("expected {} input columns, got {}", self.arch.input_dim, x.cols()),
            });
        }
        Ok(())
    }

    /// Posterior parameters for each row of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentGaussian> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let (mean, logvar) = bound.encode(&mut g, xi, self.latent_dim())?;
        LatentGaussian::new(g.value(mean).clone(), g.value(logvar).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// Predicted next latent for each row of `mean`.
    pub fn dynamics_step(&self, mean: &Tensor) -> Result<Tensor> {
        if mean.cols() != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "dynamics_step",
                node: 0,
                detail: format!("expected {} latent columns, got {}", self.latent_dim(), mean.cols()),
            });
        }
        self.dynamics.forward(mean)
    }

    pub fn to_container(&self, prefix: &str) -> Container {
        let mut c = Container::new();
        for (part, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder), ("dynamics", &self.dynamics)] {
            for (i, (w, b)) in mlp.layers.iter().enumerate() {
                c.insert(format!("{prefix}{part}/{i}/w"), w.clone());
                c.insert(format!("{prefix}{part}/{i}/b"), b.clone());
            }
        }
        c
    }

    /// Restores weights written by [`TideNet::to_container`].
    pub fn from_container(arch: Architecture, c: &Container, prefix: &str) -> Result<Self> {
        let mut net = Self::new(arch, 0)?;
        for (part, mlp) in [
            ("encoder", &mut net.encoder),
            ("decoder", &mut net.decoder),
            ("dynamics", &mut net.dynamics),
        ] {
            for (i, (w, b)) in mlp.layers.iter_mut().enumerate() {
                for (name, slot) in [("w", w), ("b", b)] {
                    let t = c.require(&format!("{prefix}{part}/{i}/{name}"))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::CorruptContainer(format!(
                            "{prefix}{part}/{i}/{name} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t.clone();
                }
            }
        }
        Ok(net)
    }
}

/// Draws `z = mean + exp(logvar / 2) * eps` with standard normal `eps`.
pub fn reparameterize<R: Rng + ?Sized>(lg: &LatentGaussian, rng: &mut R) -> Tensor {
    let data = lg
        .mean
        .data()
        .iter()
        .zip(lg.logvar.data())
        .map(|(&m, &lv)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * eps
        })
        .collect();
    Tensor::new(lg.mean.shape().to_vec(), data).expect("same shape as mean")
}

/// Standard normal noise of the given shape.
pub fn standard_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny() -> TideNet {
        let mut arch = Architecture::new(6, 2);
        arch.hidden = vec![5, 4];
        arch.dynamics_width = 3;
        TideNet::new(arch, 11).unwrap()
    }

    #[test]
    fn shapes_follow_architecture() {
        let net = tiny();
        assert_eq!(net.encoder.output_dim(), 4);
        assert_eq!(net.decoder.output_dim(), 6);
        assert_eq!((net.dynamics.input_dim(), net.dynamics.output_dim()), (2, 2));
        assert_eq!(net.dynamics.layers.len(), 3);
        let x = Tensor::filled(&[7, 6], 0.3);
        let lg = net.encode(&x).unwrap();
        assert_eq!(lg.mean.shape(), &[7, 2]);
        assert_eq!(lg, net.encode(&x).unwrap());
        assert!(net.encode(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut net = tiny();
        let last = net.encoder.layers.len() - 1;
        net.encoder.layers[last].1 = Tensor::matrix(1, 4, vec![0.0, 0.0, 500.0, -500.0]).unwrap();
        let lg = net.encode(&Tensor::zeros(&[1, 6])).unwrap();
        assert_eq!(lg.logvar.data(), &[LOGVAR_MAX, LOGVAR_MIN]);
    }

    #[test]
    fn degenerate_posterior_samples_its_mean() {
        let mean = Tensor::matrix(1, 3, vec![15.0, -20.0, 6.0]).unwrap();
        let lg = LatentGaussian::new(mean.clone(), Tensor::filled(&[1, 3], LOGVAR_MIN)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = reparameterize(&lg, &mut rng);
        for (a, m) in z.data().iter().zip(mean.data()) {
            assert!((a - m).abs() <= 1e-2 * m.abs() + 1e-4);
        }
    }

    #[test]
    fn sample_mean_converges() {
        let n = 100_000;
        let lg = LatentGaussian::new(
            Tensor::matrix(1, 2, vec![0.7, -1.2]).unwrap(),
            Tensor::matrix(1, 2, vec![0.0, 2.0_f64.ln()]).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&lg, &mut rng);
            acc[0] += z.data()[0];
            acc[1] += z.data()[1];
        }
        for (k, (&a, sd)) in acc.iter().zip([1.0, 2.0_f64.sqrt()]).enumerate() {
            let bound = 3.0 * sd / (n as f64).sqrt();
            assert!((a / n as f64 - lg.mean.data()[k]).abs() < bound);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(reparameterize(&lg, &mut r1), reparameterize(&lg, &mut r2));
    }

    #[test]
    fn dynamics_gradient_matches_differences() {
        let net = tiny();
        let mu = Tensor::matrix(3, 2, vec![0.1, -0.4, 0.9, 0.3, -0.7, 0.2]).unwrap();
        assert_eq!(net.dynamics_step(&mu).unwrap().shape(), &[3, 2]);
        let err = grad_check(
            |g, p| {
                let bound = net.dynamics.bind(g, false);
                let out = bound.forward(g, p[0])?;
                let sq = g.square(out)?;
                let s = g.sin(sq)?;
                g.sum(s)
            },
            &[mu],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn container_round_trip() {
        let net = tiny();
        let c = net.to_container("net/");
        let back = TideNet::from_container(net.arch.clone(), &c, "net/").unwrap();
        assert_eq!(back, net);
        let mut other = net.arch.clone();
        other.latent_dim = 3;
        assert!(TideNet::from_container(other, &c, "net/").is_err());
    }
}
