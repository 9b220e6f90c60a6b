//! Dense Gaussian VAE with hand-written reverse-mode gradients.
//!
//! The encoder maps a standardized data vector to `(μ_z, log σ²_z)` and the
//! decoder maps a latent vector to `(μ_x, log σ²_x)`, both diagonal Gaussians.
//! Log-variances are clamped to `[-12, 6]`; outside that band their gradient
//! is zero. Training maximises the single-sample ELBO
//!
//! ```text
//! log p(x|z) − KL(q(z|x) ‖ N(0, I)),   z = μ_z + σ_z ⊙ ε
//! ```
//!
//! with Adam. Inputs are standardized per feature with statistics taken from
//! the training set and stored in the model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcube::VolCube;

pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 6.0;
/// Latent units with activity below this count as inactive.
pub const ACTIVITY_THRESHOLD: f64 = 0.1;

const MODEL_MAGIC: &[u8; 8] = b"VGVAEMDL";
const MODEL_VERSION: u32 = 1;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl MlpLayer {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        MlpLayer {
            weight: Array2::zeros((n_in, n_out)),
            bias: Array1::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.ncols()
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

fn activate(a: Activation, mut z: Array2<f64>) -> Array2<f64> {
    if a == Activation::Relu {
        z.mapv_inplace(|v| v.max(0.0));
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

/// Values kept from a forward pass for the backward pass.
struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrad {
    fn zeros_like(m: &Mlp) -> Self {
        MlpGrad {
            weight: m.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: m.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }
}

impl Mlp {
    /// Hidden layers use `hidden_activation`; the output layer is linear.
    pub fn zeros(n_in: usize, hidden: &[usize], n_out: usize, hidden_activation: Activation) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_out);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let a = if l == last { Activation::Identity } else { hidden_activation };
                MlpLayer::zeros(w[0], w[1], a)
            })
            .collect();
        Mlp { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in &self.layers {
            h = activate(l.activation, l.pre_activation(h.view()));
        }
        h
    }

    fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for l in &self.layers {
            let z = l.pre_activation(h.view());
            tape.inputs.push(h);
            h = activate(l.activation, z.clone());
            tape.pre.push(z);
        }
        (h, tape)
    }

    /// Accumulates parameter gradients into `grad` and returns ∂/∂input.
    fn backward(&self, tape: &Tape, d_out: Array2<f64>, grad: &mut MlpGrad) -> Array2<f64> {
        let mut d = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                Zip::from(&mut d).and(&tape.pre[l]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            grad.weight[l] += &tape.inputs[l].t().dot(&d);
            grad.bias[l] += &d.sum_axis(Axis(0));
            d = d.dot(&layer.weight.t());
        }
        d
    }
}

/// Layer sizes of a VAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
}

impl VaeArch {
    /// 250/200/150/100 encoder, mirrored decoder, ReLU.
    pub fn standard(data_dim: usize, latent_dim: usize) -> Self {
        VaeArch {
            data_dim,
            latent_dim,
            encoder_hidden: vec![250, 200, 150, 100],
            decoder_hidden: vec![100, 150, 200, 250],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::InvalidParameter("VAE layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// Every weight `N(0, std²)`.
    Normal { std: f64 },
    /// `N(0, 2 / fan_in)` for ReLU layers and `N(0, 1 / fan_in)` for linear ones.
    FanIn,
    /// As `FanIn`, but the encoder's output layer starts at zero so that
    /// `q(z|x)` is the prior for every input. Latent units then become
    /// active only when the reconstruction pays for their KL cost.
    FanInPrior,
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal {
            std: (1.0f64 / 30.0).sqrt(),
        }
    }
}

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; constant columns get
    /// unit scale.
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InsufficientData("empty dataset".into()));
        }
        let mean = data.mean_axis(Axis(0)).expect("non-empty");
        let std = data.var_axis(Axis(0), 0.0).mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Ok(Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn standardize_rows(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mean = ArrayView1::from(&self.mean[..]);
        let std = ArrayView1::from(&self.std[..]);
        (&data - &mean) / &std
    }
}

/// ELBO and its two parts, averaged over a batch when batched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
}

impl VaeGrad {
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for g in [&self.encoder, &self.decoder] {
            s += g.weight.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
            s += g.bias.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        }
        s.sqrt()
    }

    /// Gradients flattened in the order of [`VaeModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [&self.encoder, &self.decoder] {
            for (w, b) in g.weight.iter().zip(&g.bias) {
                out.extend(w.iter());
                out.extend(b.iter());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub standardizer: Standardizer,
    /// Training configuration echoed into the model file, if trained.
    pub train_config: Option<TrainConfig>,
}

fn clamp_logvar(v: f64) -> f64 {
    v.clamp(LOGVAR_MIN, LOGVAR_MAX)
}

fn logvar_passes(v: f64) -> bool {
    (LOGVAR_MIN..=LOGVAR_MAX).contains(&v)
}

/// Splits a `n × 2m` head output into `(μ, clamped log σ²)` and the raw
/// log-variance.
fn split_head(out: &Array2<f64>, m: usize) -> (Array2<f64>, Array2<f64>) {
    (out.slice(s![.., ..m]).to_owned(), out.slice(s![.., m..]).to_owned())
}

/// `μ + √σ² ⊙ ε`
pub fn reparameterized_sample(mu: &[f64], var: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(var)
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect()
}

/// Closed-form KL(N(μ, diag σ²) ‖ N(0, I)) from log-variances.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mu)
        .zip(logvar)
        .map(|((x, m), lv)| LN_2PI + lv + (x - m).powi(2) * (-lv).exp())
        .sum::<f64>()
}

fn as_row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice")
}

impl VaeModel {
    /// All weights and biases zero, identity standardization.
    pub fn zeros(arch: VaeArch) -> Result<Self> {
        arch.validate()?;
        Ok(VaeModel {
            encoder: Mlp::zeros(arch.data_dim, &arch.encoder_hidden, 2 * arch.latent_dim, arch.activation),
            decoder: Mlp::zeros(arch.latent_dim, &arch.decoder_hidden, 2 * arch.data_dim, arch.activation),
            standardizer: Standardizer::identity(arch.data_dim),
            arch,
            train_config: None,
        })
    }

    /// Random weights, zero biases.
    pub fn init<R: Rng>(arch: VaeArch, init: Init, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        for mlp in [&mut m.encoder, &mut m.decoder] {
            for l in mlp.layers.iter_mut() {
                let std = match init {
                    Init::Normal { std } => std,
                    Init::FanIn | Init::FanInPrior => {
                        let gain = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
                        (gain / l.n_in() as f64).sqrt()
                    }
                };
                l.weight.mapv_inplace(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    std * e
                });
            }
        }
        if init == Init::FanInPrior {
            m.encoder.layers.last_mut().expect("at least one layer").weight.fill(0.0);
        }
        Ok(m)
    }

    /// Linear-Gaussian model `x = W z + b + ε`, `ε ~ N(0, diag ψ)`, whose
    /// encoder is the exact posterior `N(Σ Wᵀ Ψ⁻¹ (x − b), Σ)` with
    /// `Σ = (I + Wᵀ Ψ⁻¹ W)⁻¹`. The posterior is diagonal only when the
    /// columns of `W` are Ψ⁻¹-orthogonal, which is required.
    pub fn linear_gaussian(loadings: ArrayView2<f64>, mean: &[f64], noise_var: &[f64]) -> Result<Self> {
        let (k, d) = loadings.dim();
        if mean.len() != k || noise_var.len() != k {
            return Err(Error::Shape {
                expected: k,
                actual: if mean.len() != k { mean.len() } else { noise_var.len() },
            });
        }
        if noise_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("noise variances must be positive".into()));
        }
        let scaled = Array2::from_shape_fn((k, d), |(i, u)| loadings[[i, u]] / noise_var[i]);
        let gram = loadings.t().dot(&scaled);
        let scale = gram.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for u in 0..d {
            for v in 0..d {
                if u != v && gram[[u, v]].abs() > 1e-10 * scale.max(1.0) {
                    return Err(Error::InvalidParameter("loadings are not orthogonal under the noise metric".into()));
                }
            }
        }
        let post_var: Vec<f64> = (0..d).map(|u| 1.0 / (1.0 + gram[[u, u]])).collect();
        let logvars = post_var.iter().map(|v| v.ln()).chain(noise_var.iter().map(|v| v.ln()));
        if logvars.clone().any(|lv| !logvar_passes(lv)) {
            return Err(Error::InvalidParameter("a variance falls outside the log-variance clamp".into()));
        }
        let arch = VaeArch {
            data_dim: k,
            latent_dim: d,
            encoder_hidden: vec![],
            decoder_hidden: vec![],
            activation: Activation::Identity,
        };
        let mut m = Self::zeros(arch)?;
        let enc = &mut m.encoder.layers[0];
        for u in 0..d {
            for i in 0..k {
                enc.weight[[i, u]] = scaled[[i, u]] * post_var[u];
            }
            enc.bias[u] = -(0..k).map(|i| scaled[[i, u]] * mean[i]).sum::<f64>() * post_var[u];
            enc.bias[d + u] = post_var[u].ln();
        }
        let dec = &mut m.decoder.layers[0];
        for i in 0..k {
            for u in 0..d {
                dec.weight[[u, i]] = loadings[[i, u]];
            }
            dec.bias[i] = mean[i];
            dec.bias[k + i] = noise_var[i].ln();
        }
        Ok(m)
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }

    /// Encoder output `(μ_z, clamped log σ²_z)` for rows of standardized data.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.data_dim() {
            return Err(Error::Shape {
                expected: self.data_dim(),
                actual: x.ncols(),
            });
        }
        let (mu, lv) = split_head(&self.encoder.forward(x), self.latent_dim());
        Ok((mu, lv.mapv(clamp_logvar)))
    }

    /// Decoder output `(μ_x, clamped log σ²_x)` for rows of latent vectors.
    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape {
                expected: self.latent_dim(),
                actual: z.ncols(),
            });
        }
        let (mu, lv) = split_head(&self.decoder.forward(z), self.data_dim());
        Ok((mu, lv.mapv(clamp_logvar)))
    }

    /// `(μ_z, σ²_z)` for one standardized data vector.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_finite(x, "encoder input")?;
        let (mu, lv) = self.encode_batch(as_row(x))?;
        Ok((mu.row(0).to_vec(), lv.row(0).mapv(f64::exp).to_vec()))
    }

    /// `(μ_x, σ²_x)` for one latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_finite(z, "decoder input")?;
        let (mu, lv) = self.decode_batch(as_row(z))?;
        Ok((mu.row(0).to_vec(), lv.row(0).mapv(f64::exp).to_vec()))
    }

    /// ELBO of one standardized vector with latent noise `noise`.
    pub fn elbo(&self, x: &[f64], noise: &[f64]) -> Result<ElboTerms> {
        self.elbo_batch(as_row(x), as_row(noise))
    }

    /// Batch-mean ELBO.
    pub fn elbo_batch(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<ElboTerms> {
        let (terms, _) = self.forward_loss(x, noise, false)?;
        Ok(terms)
    }

    /// Batch-mean ELBO terms and exact gradients of −ELBO (batch mean).
    pub fn backward(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(ElboTerms, VaeGrad)> {
        let (terms, grad) = self.forward_loss(x, noise, true)?;
        Ok((terms, grad.expect("gradient requested")))
    }

    fn forward_loss(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>, with_grad: bool) -> Result<(ElboTerms, Option<VaeGrad>)> {
        let (k, d) = (self.data_dim(), self.latent_dim());
        let n = x.nrows();
        if x.ncols() != k {
            return Err(Error::Shape {
                expected: k,
                actual: x.ncols(),
            });
        }
        if noise.ncols() != d || noise.nrows() != n {
            return Err(Error::Shape {
                expected: n * d,
                actual: noise.len(),
            });
        }
        if n == 0 {
            return Err(Error::InsufficientData("empty batch".into()));
        }

        let (enc_out, enc_tape) = self.encoder.forward_tape(x);
        let (mu_z, lv_z_raw) = split_head(&enc_out, d);
        let lv_z = lv_z_raw.mapv(clamp_logvar);
        let sd_z = lv_z.mapv(|v| (0.5 * v).exp());
        let z = &mu_z + &(&sd_z * &noise);

        let (dec_out, dec_tape) = self.decoder.forward_tape(z.view());
        let (mu_x, lv_x_raw) = split_head(&dec_out, k);
        let lv_x = lv_x_raw.mapv(clamp_logvar);
        let inv_var_x = lv_x.mapv(|v| (-v).exp());
        let resid = &x - &mu_x;

        let nf = n as f64;
        let recon = -0.5 * Zip::from(&resid).and(&lv_x).and(&inv_var_x).fold(0.0, |acc, &r, &lv, &iv| acc + LN_2PI + lv + r * r * iv) / nf;
        let kl = 0.5 * Zip::from(&mu_z).and(&lv_z).fold(0.0, |acc, &m, &lv| acc + m * m + lv.exp() - 1.0 - lv) / nf;
        let terms = ElboTerms {
            elbo: recon - kl,
            recon,
            kl,
        };
        if !(terms.elbo.is_finite()) {
            return Err(Error::NonFinite("ELBO".into()));
        }
        if !with_grad {
            return Ok((terms, None));
        }

        // −ELBO, averaged over the batch
        let mut d_dec = Array2::zeros((n, 2 * k));
        {
            let (mut d_mu, mut d_lv) = d_dec.view_mut().split_at(Axis(1), k);
            Zip::from(&mut d_mu).and(&resid).and(&inv_var_x).for_each(|g, &r, &iv| *g = -r * iv / nf);
            Zip::from(&mut d_lv)
                .and(&resid)
                .and(&inv_var_x)
                .and(&lv_x_raw)
                .for_each(|g, &r, &iv, &raw| *g = if logvar_passes(raw) { 0.5 * (1.0 - r * r * iv) / nf } else { 0.0 });
        }
        let mut dec_grad = MlpGrad::zeros_like(&self.decoder);
        let d_z = self.decoder.backward(&dec_tape, d_dec, &mut dec_grad);

        let mut d_enc = Array2::zeros((n, 2 * d));
        {
            let (mut d_mu, mut d_lv) = d_enc.view_mut().split_at(Axis(1), d);
            Zip::from(&mut d_mu).and(&mu_z).and(&d_z).for_each(|g, &m, &dz| *g = m / nf + dz);
            Zip::from(&mut d_lv)
                .and(&lv_z_raw)
                .and(&sd_z)
                .and(&d_z)
                .and(&noise)
                .for_each(|g, &raw, &sd, &dz, &e| {
                    *g = if logvar_passes(raw) { 0.5 * (sd * sd - 1.0) / nf + dz * e * 0.5 * sd } else { 0.0 };
                });
        }
        let mut enc_grad = MlpGrad::zeros_like(&self.encoder);
        self.encoder.backward(&enc_tape, d_enc, &mut enc_grad);
        Ok((
            terms,
            Some(VaeGrad {
                encoder: enc_grad,
                decoder: dec_grad,
            }),
        ))
    }

    /// All weights and biases, encoder then decoder, each layer weight
    /// (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in [&self.encoder, &self.decoder] {
            for l in &m.layers {
                out.extend(l.weight.iter());
                out.extend(l.bias.iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                actual: p.len(),
            });
        }
        let mut it = p.iter();
        for m in [&mut self.encoder, &mut self.decoder] {
            for l in m.layers.iter_mut() {
                l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
                l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
            }
        }
        Ok(())
    }

    /// Encoder means for rows of standardized data.
    pub fn latent_means(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.encode_batch(x)?.0)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `VGVAEMDL`, version (u32 LE), header length (u64 LE), JSON header,
    /// then every array as f64 LE: encoder layers (weight, bias), decoder
    /// layers, standardizer mean, standardizer std.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = ModelHeader {
            arch: self.arch.clone(),
            encoder_shapes: self.encoder.layers.iter().map(|l| (l.n_in(), l.n_out(), l.activation)).collect(),
            decoder_shapes: self.decoder.layers.iter().map(|l| (l.n_in(), l.n_out(), l.activation)).collect(),
            standardizer_dim: self.standardizer.dim(),
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |xs: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        for m in [&self.encoder, &self.decoder] {
            for l in &m.layers {
                put(&mut l.weight.iter().copied())?;
                put(&mut l.bias.iter().copied())?;
            }
        }
        put(&mut self.standardizer.mean.iter().copied())?;
        put(&mut self.standardizer.std.iter().copied())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(b4);
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 1 << 24 {
            return Err(bad("header too large"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(&json)?;
        let mut model = VaeModel::zeros(header.arch.clone())?;
        let shapes = |m: &Mlp| m.layers.iter().map(|l| (l.n_in(), l.n_out(), l.activation)).collect::<Vec<_>>();
        if shapes(&model.encoder) != header.encoder_shapes || shapes(&model.decoder) != header.decoder_shapes {
            return Err(bad("layer shapes do not match the architecture"));
        }
        if header.standardizer_dim != header.arch.data_dim {
            return Err(bad("standardizer dimension differs from data dimension"));
        }
        let mut get = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf).map_err(|_| bad("truncated weights"))?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        for m in [&mut model.encoder, &mut model.decoder] {
            for l in m.layers.iter_mut() {
                let w = get(l.weight.len())?;
                l.weight = Array2::from_shape_vec(l.weight.raw_dim(), w).expect("sized");
                l.bias = Array1::from(get(l.bias.len())?);
            }
        }
        let k = header.arch.data_dim;
        model.standardizer = Standardizer {
            mean: get(k)?,
            std: get(k)?,
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|_| bad("read error"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        model.train_config = header.train_config;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    arch: VaeArch,
    encoder_shapes: Vec<(usize, usize, Activation)>,
    decoder_shapes: Vec<(usize, usize, Activation)>,
    standardizer_dim: usize,
    train_config: Option<TrainConfig>,
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None`: full batch up to 1024 rows, minibatches of 256 beyond.
    pub batch_size: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init: Init,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50_000,
            learning_rate: 1e-6,
            batch_size: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init: Init::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size != Some(0)
            && match self.init {
                Init::Normal { std } => std >= 0.0,
                Init::FanIn | Init::FanInPrior => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("invalid training configuration".into()))
        }
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= 1024 => n,
            None => 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "elbo", "recon", "kl"]).map_err(io)?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.elbo.to_string(), h.recon.to_string(), h.kl.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Rows of raw cube values, one cube per row.
pub fn dataset_matrix(cubes: &[VolCube]) -> Result<Array2<f64>> {
    let k = cubes
        .first()
        .map(|c| c.values().len())
        .ok_or_else(|| Error::InsufficientData("no cubes".into()))?;
    let mut out = Array2::zeros((cubes.len(), k));
    for (r, c) in cubes.iter().enumerate() {
        if c.values().len() != k {
            return Err(Error::Shape {
                expected: k,
                actual: c.values().len(),
            });
        }
        out.row_mut(r).assign(&ArrayView1::from(c.values()));
    }
    Ok(out)
}

/// Fits the standardizer on `data` (raw rows), initialises a model of shape
/// `arch` and trains it with Adam. When `checkpoint` is given the model is
/// written there every `config.checkpoint_every` epochs; a non-finite loss
/// aborts training and leaves the last checkpoint in place.
pub fn train(
    data: ArrayView2<f64>,
    arch: VaeArch,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(VaeModel, Vec<EpochLoss>)> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if data.ncols() != arch.data_dim {
        return Err(Error::Shape {
            expected: arch.data_dim,
            actual: data.ncols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VaeModel::init(arch, config.init, &mut rng)?;
    model.standardizer = Standardizer::fit(data)?;
    model.train_config = Some(config.clone());
    let x = model.standardizer.standardize_rows(data);
    let history = train_model(&mut model, x.view(), config, &mut rng, checkpoint)?;
    Ok((model, history))
}

/// Continues training `model` on already standardized rows.
pub fn train_model<R: Rng>(
    model: &mut VaeModel,
    x: ArrayView2<f64>,
    config: &TrainConfig,
    rng: &mut R,
    checkpoint: Option<&Path>,
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    let n = x.nrows();
    let d = model.latent_dim();
    let bs = config.effective_batch_size(n);
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if bs < n {
            order.shuffle(rng);
        }
        let (mut elbo, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(bs) {
            let batch = if bs < n { x.select(Axis(0), chunk) } else { x.to_owned() };
            let noise = Array2::from_shape_simple_fn((chunk.len(), d), || rng.sample::<f64, _>(StandardNormal));
            let (terms, grad) = match model.backward(batch.view(), noise.view()) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::TrainingDiverged { epoch }),
                Err(e) => return Err(e),
            };
            let g = grad.flatten();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(config, &mut params, &g);
            model.set_params(&params)?;
            let w = chunk.len() as f64 / n as f64;
            elbo += w * terms.elbo;
            recon += w * terms.recon;
            kl += w * terms.kl;
        }
        history.push(EpochLoss { epoch, elbo, recon, kl });
        if epoch % 100 == 0 || epoch == config.epochs {
            log::debug!("epoch {epoch}: elbo {elbo:.4} recon {recon:.4} kl {kl:.4}");
        }
        if let Some(path) = checkpoint {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                model.write(path)?;
            }
        }
    }
    Ok(history)
}

/// Per-unit activity `A_u = Var_x(E_q[z_u | x])` over rows of standardized
/// data (sample variance).
pub fn latent_activity(model: &VaeModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientData("latent activity needs at least 2 rows".into()));
    }
    let mu = model.latent_means(x)?;
    Ok(mu.var_axis(Axis(0), 1.0).to_vec())
}

pub fn count_active(activity: &[f64], threshold: f64) -> usize {
    activity.iter().filter(|&&a| a >= threshold).count()
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
