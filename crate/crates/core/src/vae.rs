//! Dense variational autoencoder trained by stochastic gradient variational
//! Bayes, with hand-written backpropagation.
//!
//! The inference network maps a patch x through fully connected ReLU layers
//! (1024, 256, 32 by default) to an affine mean head and an affine
//! log-variance head. Sampling uses the location-scale form
//! z = mu + exp(log_var / 2) * eps with eps drawn from N(0, I). The decoder
//! mirrors the encoder and ends in a logistic sigmoid, giving a multivariate
//! Bernoulli likelihood over [0,1]-normalized intensities. The loss is the
//! negative evidence lower bound: Bernoulli cross entropy plus the
//! closed-form KL divergence to a standard normal prior,
//! -1/2 sum(1 + log s^2 - mu^2 - s^2). An alternative mixture-of-Gaussians
//! prior replaces the closed form with a single-sample Monte Carlo estimate
//! log q(z|x) - log p(z).
//!
//! Training is plain minibatch SGD. All randomness comes from one seeded
//! stream consumed in a documented order (see [`train`]), so runs are
//! bit-reproducible.

use crate::linalg::{add_tn, log_sum_exp, matmul_nn, matmul_nt, Mat};
use crate::patch::PatchDataset;
use crate::rng::Rng64;
use std::fmt;

/// Bernoulli probabilities are clamped to this range inside the loss so
/// saturated sigmoids cannot produce infinities.
pub const PROB_CLAMP: f64 = 1e-7;
/// log sigma^2 is clamped to [-LOGVAR_CLAMP, LOGVAR_CLAMP] before
/// exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum VaeError {
    ShapeMismatch(String),
    EmptyDataset,
    BadConfig(String),
    BadCheckpoint(String),
}

impl fmt::Display for VaeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VaeError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            VaeError::EmptyDataset => write!(f, "training dataset is empty"),
            VaeError::BadConfig(m) => write!(f, "bad training config: {m}"),
            VaeError::BadCheckpoint(m) => write!(f, "bad checkpoint: {m}"),
        }
    }
}

impl std::error::Error for VaeError {}

/// One dense layer, y = W x + b with W stored out_dim x in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// Scaled-uniform init: entries uniform in [-r, r] with
    /// r = sqrt(6 / (fan_in + fan_out)), drawn row-major; biases zero.
    fn init(out_dim: usize, in_dim: usize, rng: &mut Rng64) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut l = Layer::zeros(out_dim, in_dim);
        for v in l.w.data.iter_mut() {
            *v = rng.uniform(-bound, bound);
        }
        l
    }
}

/// All encoder and decoder parameters. The same struct doubles as the
/// gradient container returned by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths, input side first.
    pub hidden: Vec<usize>,
    pub encoder: Vec<Layer>,
    pub head_mu: Layer,
    pub head_logvar: Layer,
    /// Mirror of the encoder: latent -> hidden[last] -> ... -> hidden[0].
    pub decoder: Vec<Layer>,
    /// hidden[0] -> input_dim, sigmoid applied on top.
    pub output: Layer,
}

impl VaeParams {
    /// Fresh parameters from the run RNG. Draw order: encoder layers input
    /// side first, mu head, log-variance head, decoder layers latent side
    /// first, output layer.
    pub fn init(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut Rng64) -> Self {
        assert!(input_dim >= 1 && latent_dim >= 1);
        let mut encoder = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &width in hidden {
            encoder.push(Layer::init(width, prev, rng));
            prev = width;
        }
        let head_mu = Layer::init(latent_dim, prev, rng);
        let head_logvar = Layer::init(latent_dim, prev, rng);
        let mut decoder = Vec::with_capacity(hidden.len());
        let mut dprev = latent_dim;
        for &width in hidden.iter().rev() {
            decoder.push(Layer::init(width, dprev, rng));
            dprev = width;
        }
        let output = Layer::init(input_dim, dprev, rng);
        VaeParams {
            input_dim,
            latent_dim,
            hidden: hidden.to_vec(),
            encoder,
            head_mu,
            head_logvar,
            decoder,
            output,
        }
    }

    /// Same shapes, all entries zero; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.w.rows, l.w.cols);
        VaeParams {
            input_dim: self.input_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            encoder: self.encoder.iter().map(z).collect(),
            head_mu: z(&self.head_mu),
            head_logvar: z(&self.head_logvar),
            decoder: self.decoder.iter().map(z).collect(),
            output: z(&self.output),
        }
    }

    /// Layers in declaration order; this order also fixes the checkpoint
    /// layout and the SGD update sweep.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.encoder.iter().collect();
        v.push(&self.head_mu);
        v.push(&self.head_logvar);
        v.extend(self.decoder.iter());
        v.push(&self.output);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.encoder.iter_mut().collect();
        v.push(&mut self.head_mu);
        v.push(&mut self.head_logvar);
        v.extend(self.decoder.iter_mut());
        v.push(&mut self.output);
        v
    }

    fn sgd_step(&mut self, grads: &VaeParams, step: f64) {
        let gl = grads.layers();
        for (p, g) in self.layers_mut().into_iter().zip(gl) {
            for (w, gw) in p.w.data.iter_mut().zip(&g.w.data) {
                *w -= step * gw;
            }
            for (b, gb) in p.b.iter_mut().zip(&g.b) {
                *b -= step * gb;
            }
        }
    }
}

/// Latent prior for the KL term.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Standard normal; KL in closed form (the canonical loss).
    StandardNormal,
    /// Mixture of isotropic Gaussians; KL estimated with the single sampled
    /// z as log q(z|x) - log p(z).
    MixtureOfGaussians(MogPrior),
}

/// Isotropic mixture components; each center is a scalar replicated across
/// the latent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MogPrior {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl MogPrior {
    pub fn new(weights: Vec<f64>, centers: Vec<f64>, sigmas: Vec<f64>) -> Result<Self, VaeError> {
        if weights.len() != centers.len() || weights.len() != sigmas.len() || weights.is_empty() {
            return Err(VaeError::BadConfig(
                "mixture prior needs equal-length, non-empty component lists".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(VaeError::BadConfig(
                "mixture prior weights and sigmas must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(MogPrior {
            weights,
            centers,
            sigmas,
        })
    }

    /// Two components at +/-1 with unit sigma.
    pub fn default_two_component() -> Self {
        MogPrior::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).expect("valid constants")
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.centers)
            .zip(&self.sigmas)
            .map(|((&w, &c), &s)| {
                let mut q = 0.0;
                for &zk in z {
                    let d = zk - c;
                    q += d * d;
                }
                w.ln() - z.len() as f64 * (0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln())
                    - q / (2.0 * s * s)
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Gradient of log p(z) with respect to z.
    fn grad_log_density(&self, z: &[f64], out: &mut [f64]) {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.centers)
            .zip(&self.sigmas)
            .map(|((&w, &c), &s)| {
                let mut q = 0.0;
                for &zk in z {
                    let d = zk - c;
                    q += d * d;
                }
                w.ln() - z.len() as f64 * (0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln())
                    - q / (2.0 * s * s)
            })
            .collect();
        let norm = log_sum_exp(&terms);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &t) in terms.iter().enumerate() {
            let resp = (t - norm).exp();
            let c = self.centers[j];
            let inv_var = 1.0 / (self.sigmas[j] * self.sigmas[j]);
            for (k, &zk) in z.iter().enumerate() {
                out[k] += resp * (-(zk - c) * inv_var);
            }
        }
    }
}

/// Per-layer pre-activations and activations kept for backpropagation.
/// Rows are samples; single-sample calls use one-row matrices.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) x: Mat,
    pub(crate) enc_pre: Vec<Mat>,
    pub(crate) enc_act: Vec<Mat>,
    pub(crate) mu: Mat,
    pub(crate) logvar_raw: Mat,
    pub(crate) logvar: Mat,
    pub(crate) sampled: Option<SampledTrace>,
}

#[derive(Debug, Clone)]
pub(crate) struct SampledTrace {
    pub(crate) eps: Mat,
    pub(crate) z: Mat,
    pub(crate) dec_pre: Vec<Mat>,
    pub(crate) dec_act: Vec<Mat>,
    pub(crate) xhat: Mat,
}

fn affine(x: &Mat, layer: &Layer, out: &mut Mat) {
    matmul_nt(x, &layer.w, out);
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for (v, b) in row.iter_mut().zip(&layer.b) {
            *v += b;
        }
    }
}

fn relu(m: &Mat) -> Mat {
    let mut out = m.clone();
    out.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Encoder half for a batch; returns (mu, logvar_raw, logvar, trace pieces).
fn encode_batch(params: &VaeParams, x: Mat) -> ForwardTrace {
    let n = x.rows;
    let mut enc_pre = Vec::with_capacity(params.encoder.len());
    let mut enc_act = Vec::with_capacity(params.encoder.len());
    let mut h = x.clone();
    for layer in &params.encoder {
        let mut pre = Mat::zeros(n, layer.w.rows);
        affine(&h, layer, &mut pre);
        let act = relu(&pre);
        enc_pre.push(pre);
        h = act.clone();
        enc_act.push(act);
    }
    let last = if params.encoder.is_empty() { &x } else { enc_act.last().unwrap() };
    let mut mu = Mat::zeros(n, params.latent_dim);
    affine(last, &params.head_mu, &mut mu);
    let mut logvar_raw = Mat::zeros(n, params.latent_dim);
    affine(last, &params.head_logvar, &mut logvar_raw);
    let mut logvar = logvar_raw.clone();
    logvar
        .data
        .iter_mut()
        .for_each(|v| *v = v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    ForwardTrace {
        x,
        enc_pre,
        enc_act,
        mu,
        logvar_raw,
        logvar,
        sampled: None,
    }
}

/// Decoder half for a batch of latent rows.
fn decode_batch(params: &VaeParams, z: &Mat) -> (Vec<Mat>, Vec<Mat>, Mat) {
    let n = z.rows;
    let mut dec_pre = Vec::with_capacity(params.decoder.len());
    let mut dec_act = Vec::with_capacity(params.decoder.len());
    let mut h = z.clone();
    for layer in &params.decoder {
        let mut pre = Mat::zeros(n, layer.w.rows);
        affine(&h, layer, &mut pre);
        let act = relu(&pre);
        dec_pre.push(pre);
        h = act.clone();
        dec_act.push(act);
    }
    let last = if params.decoder.is_empty() { z } else { dec_act.last().unwrap() };
    let mut logits = Mat::zeros(n, params.input_dim);
    affine(last, &params.output, &mut logits);
    let mut xhat = logits;
    xhat.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    (dec_pre, dec_act, xhat)
}

/// Full forward pass for a batch with the given noise rows.
fn forward_batch(params: &VaeParams, x: Mat, eps: Mat) -> ForwardTrace {
    let mut trace = encode_batch(params, x);
    let n = trace.mu.rows;
    let mut z = Mat::zeros(n, params.latent_dim);
    for i in 0..z.data.len() {
        z.data[i] = trace.mu.data[i] + (trace.logvar.data[i] / 2.0).exp() * eps.data[i];
    }
    let (dec_pre, dec_act, xhat) = decode_batch(params, &z);
    trace.sampled = Some(SampledTrace {
        eps,
        z,
        dec_pre,
        dec_act,
        xhat,
    });
    trace
}

/// Deterministic encoding of one patch: (mu, log sigma^2, trace). Hidden
/// layers are ReLU; both heads are affine.
pub fn encode(
    params: &VaeParams,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, ForwardTrace), VaeError> {
    if x.len() != params.input_dim {
        return Err(VaeError::ShapeMismatch(format!(
            "input length {} != input_dim {}",
            x.len(),
            params.input_dim
        )));
    }
    let trace = encode_batch(params, Mat::from_vec(1, x.len(), x.to_vec()));
    Ok((trace.mu.row(0).to_vec(), trace.logvar.row(0).to_vec(), trace))
}

/// Location-scale transform z = mu + exp(log_var/2) * eps, elementwise.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>, VaeError> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(VaeError::ShapeMismatch(format!(
            "reparameterize lengths {} / {} / {}",
            mu.len(),
            log_var.len(),
            eps.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// Decodes a latent vector to Bernoulli means, strictly inside (0, 1).
pub fn decode(params: &VaeParams, z: &[f64]) -> Result<Vec<f64>, VaeError> {
    if z.len() != params.latent_dim {
        return Err(VaeError::ShapeMismatch(format!(
            "latent length {} != latent_dim {}",
            z.len(),
            params.latent_dim
        )));
    }
    let (_, _, xhat) = decode_batch(params, &Mat::from_vec(1, z.len(), z.to_vec()));
    Ok(xhat.row(0).to_vec())
}

/// Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over coordinates:
/// -1/2 sum(1 + log sigma^2 - mu^2 - sigma^2).
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> f64 {
    assert_eq!(mu.len(), log_var.len(), "kl needs equal lengths");
    let mut acc = 0.0;
    for (&m, &lv) in mu.iter().zip(log_var) {
        acc += 1.0 + lv - m * m - lv.exp();
    }
    -0.5 * acc
}

/// Loss components: Bernoulli negative log-likelihood and the KL term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelboParts {
    pub recon: f64,
    pub kl: f64,
}

fn bce(x: &[f64], xhat: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&t, &p) in x.iter().zip(xhat) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    acc
}

fn kl_batch(trace: &ForwardTrace, prior: &Prior, row: usize) -> f64 {
    match prior {
        Prior::StandardNormal => kl_closed_form(trace.mu.row(row), trace.logvar.row(row)),
        Prior::MixtureOfGaussians(mog) => {
            let s = trace.sampled.as_ref().expect("sampled trace");
            // log q(z|x) collapses because (z - mu)/sigma = eps
            let mut log_q = 0.0;
            for (k, &lv) in trace.logvar.row(row).iter().enumerate() {
                let e = s.eps.row(row)[k];
                log_q += -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * lv - 0.5 * e * e;
            }
            log_q - mog.log_density(s.z.row(row))
        }
    }
}

/// NELBO for one patch at fixed noise, split into (recon, kl).
pub fn nelbo(params: &VaeParams, x: &[f64], eps: &[f64]) -> Result<(f64, NelboParts), VaeError> {
    nelbo_with_prior(params, &Prior::StandardNormal, x, eps)
}

pub fn nelbo_with_prior(
    params: &VaeParams,
    prior: &Prior,
    x: &[f64],
    eps: &[f64],
) -> Result<(f64, NelboParts), VaeError> {
    check_sample_shapes(params, x, eps)?;
    let trace = forward_batch(
        params,
        Mat::from_vec(1, x.len(), x.to_vec()),
        Mat::from_vec(1, eps.len(), eps.to_vec()),
    );
    let s = trace.sampled.as_ref().expect("sampled trace");
    let recon = bce(trace.x.row(0), s.xhat.row(0));
    let kl = kl_batch(&trace, prior, 0);
    Ok((recon + kl, NelboParts { recon, kl }))
}

fn check_sample_shapes(params: &VaeParams, x: &[f64], eps: &[f64]) -> Result<(), VaeError> {
    if x.len() != params.input_dim {
        return Err(VaeError::ShapeMismatch(format!(
            "input length {} != input_dim {}",
            x.len(),
            params.input_dim
        )));
    }
    if eps.len() != params.latent_dim {
        return Err(VaeError::ShapeMismatch(format!(
            "eps length {} != latent_dim {}",
            eps.len(),
            params.latent_dim
        )));
    }
    Ok(())
}

/// Accumulates d(sum of per-sample NELBO)/d(params) for a forward trace
/// into `grads`, and returns the summed loss parts. The reduction runs in
/// sample order, so results do not depend on batch grouping.
fn backward_batch(
    params: &VaeParams,
    trace: &ForwardTrace,
    prior: &Prior,
    grads: &mut VaeParams,
) -> (f64, f64) {
    let s = trace.sampled.as_ref().expect("backward needs a sampled trace");
    let n = trace.x.rows;

    // loss values (for the caller's bookkeeping)
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..n {
        recon_sum += bce(trace.x.row(i), s.xhat.row(i));
        kl_sum += kl_batch(trace, prior, i);
    }

    // output layer: dL/dlogits = xhat - x where the probability is inside
    // the clamp window, 0 where clamped (exact gradient of the computed loss)
    let mut delta = Mat::zeros(n, params.input_dim);
    for i in 0..n * params.input_dim {
        let p = s.xhat.data[i];
        delta.data[i] = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
            p - trace.x.data[i]
        } else {
            0.0
        };
    }

    let dec_input_last: &Mat = if params.decoder.is_empty() {
        &s.z
    } else {
        s.dec_act.last().unwrap()
    };
    add_tn(&mut grads.output.w, &delta, dec_input_last);
    add_col_sums(&mut grads.output.b, &delta);
    let mut delta = {
        let mut d = Mat::zeros(n, params.output.w.cols);
        matmul_nn(&delta, &params.output.w, &mut d);
        d
    };

    // decoder hidden layers, output side back to the latent
    for li in (0..params.decoder.len()).rev() {
        mask_relu(&mut delta, &s.dec_pre[li]);
        let input: &Mat = if li == 0 { &s.z } else { &s.dec_act[li - 1] };
        add_tn(&mut grads.decoder[li].w, &delta, input);
        add_col_sums(&mut grads.decoder[li].b, &delta);
        let mut d = Mat::zeros(n, params.decoder[li].w.cols);
        matmul_nn(&delta, &params.decoder[li].w, &mut d);
        delta = d;
    }

    // delta now holds dL/dz from the reconstruction path
    let l = params.latent_dim;
    let mut dmu = Mat::zeros(n, l);
    let mut dlogvar = Mat::zeros(n, l);
    match prior {
        Prior::StandardNormal => {
            for i in 0..n * l {
                let dz = delta.data[i];
                let lv = trace.logvar.data[i];
                let half_sigma_eps = 0.5 * (lv / 2.0).exp() * s.eps.data[i];
                dmu.data[i] = dz + trace.mu.data[i];
                dlogvar.data[i] = dz * half_sigma_eps + 0.5 * (lv.exp() - 1.0);
            }
        }
        Prior::MixtureOfGaussians(mog) => {
            let mut grad_p = vec![0.0; l];
            for row in 0..n {
                mog.grad_log_density(s.z.row(row), &mut grad_p);
                for k in 0..l {
                    let i = row * l + k;
                    let dz = delta.data[i] - grad_p[k];
                    let lv = trace.logvar.data[i];
                    let half_sigma_eps = 0.5 * (lv / 2.0).exp() * s.eps.data[i];
                    dmu.data[i] = dz;
                    // -1/2 from d log q / d logvar at fixed eps
                    dlogvar.data[i] = dz * half_sigma_eps - 0.5;
                }
            }
        }
    }
    // through the logvar clamp: zero outside the open window
    for i in 0..n * l {
        let raw = trace.logvar_raw.data[i];
        if raw.abs() >= LOGVAR_CLAMP {
            dlogvar.data[i] = 0.0;
        }
    }

    let enc_last: &Mat = if params.encoder.is_empty() {
        &trace.x
    } else {
        trace.enc_act.last().unwrap()
    };
    add_tn(&mut grads.head_mu.w, &dmu, enc_last);
    add_col_sums(&mut grads.head_mu.b, &dmu);
    add_tn(&mut grads.head_logvar.w, &dlogvar, enc_last);
    add_col_sums(&mut grads.head_logvar.b, &dlogvar);

    let mut delta = {
        let width = params.head_mu.w.cols;
        let mut a = Mat::zeros(n, width);
        matmul_nn(&dmu, &params.head_mu.w, &mut a);
        let mut b = Mat::zeros(n, width);
        matmul_nn(&dlogvar, &params.head_logvar.w, &mut b);
        for i in 0..a.data.len() {
            a.data[i] += b.data[i];
        }
        a
    };

    for li in (0..params.encoder.len()).rev() {
        mask_relu(&mut delta, &trace.enc_pre[li]);
        let input: &Mat = if li == 0 { &trace.x } else { &trace.enc_act[li - 1] };
        add_tn(&mut grads.encoder[li].w, &delta, input);
        add_col_sums(&mut grads.encoder[li].b, &delta);
        if li > 0 {
            let mut d = Mat::zeros(n, params.encoder[li].w.cols);
            matmul_nn(&delta, &params.encoder[li].w, &mut d);
            delta = d;
        }
    }

    (recon_sum, kl_sum)
}

fn add_col_sums(acc: &mut [f64], m: &Mat) {
    for r in 0..m.rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn mask_relu(delta: &mut Mat, pre: &Mat) {
    for (d, &p) in delta.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Exact pathwise gradient of [`nelbo`] at fixed eps, same shape as the
/// parameters.
pub fn backward(
    params: &VaeParams,
    x: &[f64],
    eps: &[f64],
) -> Result<(VaeParams, f64, NelboParts), VaeError> {
    backward_with_prior(params, &Prior::StandardNormal, x, eps)
}

pub fn backward_with_prior(
    params: &VaeParams,
    prior: &Prior,
    x: &[f64],
    eps: &[f64],
) -> Result<(VaeParams, f64, NelboParts), VaeError> {
    check_sample_shapes(params, x, eps)?;
    let trace = forward_batch(
        params,
        Mat::from_vec(1, x.len(), x.to_vec()),
        Mat::from_vec(1, eps.len(), eps.to_vec()),
    );
    let mut grads = params.zeros_like();
    let (recon, kl) = backward_batch(params, &trace, prior, &mut grads);
    Ok((grads, recon + kl, NelboParts { recon, kl }))
}

/// Training hyperparameters. The default `hidden` widths are the
/// production layout; tests shrink them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub prior: Prior,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            mc_samples: 1,
            seed: 1,
            latent_dim: 16,
            hidden: vec![1024, 256, 32],
            prior: Prior::StandardNormal,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), VaeError> {
        if self.epochs == 0 {
            return Err(VaeError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(VaeError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(VaeError::BadConfig("mc_samples must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(VaeError::BadConfig("latent_dim must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(VaeError::BadConfig(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-patch posterior statistics plus the geometry needed to backtrace
/// patches into the image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
    pub geometry: Vec<(usize, usize)>,
    pub patch_size: usize,
    pub source_dims: (usize, usize),
}

const EVAL_STREAM_SALT: u64 = 0x0E7A_15EE_D0DD_BA11;

/// Minibatch SGD on the NELBO.
///
/// One RNG stream seeded with `cfg.seed` is consumed in this order: weight
/// init, then per epoch a Fisher-Yates shuffle of the sample order followed
/// by, per optimizer step and Monte Carlo round, one eps row per sample in
/// batch order. The per-epoch trace entry is a separate evaluation pass over
/// the dataset in storage order whose noise comes from a second stream
/// re-seeded identically every epoch (seed xor a fixed salt), so the trace
/// is comparable across epochs and exactly flat at learning rate zero.
pub fn train(
    dataset: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<(VaeParams, Vec<f64>), VaeError> {
    cfg.validate()?;
    let n = dataset.patches.len();
    if n == 0 {
        return Err(VaeError::EmptyDataset);
    }
    let d = dataset.patch_size * dataset.patch_size;
    let l = cfg.latent_dim;

    let mut rng = Rng64::new(cfg.seed);
    let mut params = VaeParams::init(d, &cfg.hidden, l, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Mat::zeros(b, d);
            for (row, &idx) in chunk.iter().enumerate() {
                x.row_mut(row).copy_from_slice(&dataset.patches[idx]);
            }
            let mut grads = params.zeros_like();
            for _round in 0..cfg.mc_samples {
                let mut eps = Mat::zeros(b, l);
                for row in 0..b {
                    rng.fill_normal(eps.row_mut(row));
                }
                let ftrace = forward_batch(&params, x.clone(), eps);
                backward_batch(&params, &ftrace, &cfg.prior, &mut grads);
            }
            let step = cfg.learning_rate / (b * cfg.mc_samples) as f64;
            params.sgd_step(&grads, step);
        }
        trace.push(mean_nelbo(&params, dataset, cfg));
    }
    Ok((params, trace))
}

/// Mean NELBO over the dataset in storage order with the fixed evaluation
/// noise stream.
fn mean_nelbo(params: &VaeParams, dataset: &PatchDataset, cfg: &TrainConfig) -> f64 {
    let mut eval_rng = Rng64::new(cfg.seed ^ EVAL_STREAM_SALT);
    let n = dataset.patches.len();
    let d = params.input_dim;
    let l = params.latent_dim;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let b = cfg.batch_size.min(n - start);
        let mut x = Mat::zeros(b, d);
        for row in 0..b {
            x.row_mut(row).copy_from_slice(&dataset.patches[start + row]);
        }
        let mut eps = Mat::zeros(b, l);
        for row in 0..b {
            eval_rng.fill_normal(eps.row_mut(row));
        }
        let trace = forward_batch(params, x, eps);
        let s = trace.sampled.as_ref().expect("sampled trace");
        for i in 0..b {
            total += bce(trace.x.row(i), s.xhat.row(i)) + kl_batch(&trace, &cfg.prior, i);
        }
        start += b;
    }
    total / n as f64
}

/// Encodes every patch (no sampling) and carries the geometry through.
pub fn latent_stats(params: &VaeParams, dataset: &PatchDataset) -> Result<LatentStats, VaeError> {
    let d = params.input_dim;
    if dataset.patch_size * dataset.patch_size != d {
        return Err(VaeError::ShapeMismatch(format!(
            "patch size {} does not match model input dim {}",
            dataset.patch_size, d
        )));
    }
    let n = dataset.patches.len();
    let mut mu = Vec::with_capacity(n);
    let mut log_var = Vec::with_capacity(n);
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let mut x = Mat::zeros(b, d);
        for row in 0..b {
            x.row_mut(row).copy_from_slice(&dataset.patches[start + row]);
        }
        let trace = encode_batch(params, x);
        for row in 0..b {
            mu.push(trace.mu.row(row).to_vec());
            log_var.push(trace.logvar.row(row).to_vec());
        }
        start += b;
    }
    Ok(LatentStats {
        mu,
        log_var,
        geometry: dataset.geometry.clone(),
        patch_size: dataset.patch_size,
        source_dims: dataset.source_dims,
    })
}

// ---------------------------------------------------------------------------
// checkpoint format: "VAE1" magic, u32 latent_dim, u32 patch_size,
// u32 hidden-layer count, hidden widths, u32 entry count, (rows, cols) pairs,
// then every matrix and bias as little-endian f64 in declaration order.
// ---------------------------------------------------------------------------

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(params: &VaeParams, patch_size: usize) -> Result<Vec<u8>, VaeError> {
    if patch_size * patch_size != params.input_dim {
        return Err(VaeError::ShapeMismatch(format!(
            "patch size {} squared != input_dim {}",
            patch_size, params.input_dim
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"VAE1");
    push_u32(&mut out, params.latent_dim as u32);
    push_u32(&mut out, patch_size as u32);
    push_u32(&mut out, params.hidden.len() as u32);
    for &h in &params.hidden {
        push_u32(&mut out, h as u32);
    }
    let layers = params.layers();
    push_u32(&mut out, (layers.len() * 2) as u32);
    for layer in &layers {
        push_u32(&mut out, layer.w.rows as u32);
        push_u32(&mut out, layer.w.cols as u32);
        push_u32(&mut out, layer.b.len() as u32);
        push_u32(&mut out, 1);
    }
    for layer in &layers {
        for v in &layer.w.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32, VaeError> {
        if self.pos + 4 > self.bytes.len() {
            return Err(VaeError::BadCheckpoint("unexpected end of file".into()));
        }
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, VaeError> {
        if self.pos + 8 * count > self.bytes.len() {
            return Err(VaeError::BadCheckpoint("data section too short".into()));
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(f64::from_le_bytes(
                self.bytes[self.pos..self.pos + 8].try_into().unwrap(),
            ));
            self.pos += 8;
        }
        Ok(v)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(VaeParams, usize), VaeError> {
    if bytes.len() < 4 || &bytes[..4] != b"VAE1" {
        return Err(VaeError::BadCheckpoint("missing VAE1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let latent_dim = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if latent_dim == 0 || patch_size == 0 || n_hidden > 64 {
        return Err(VaeError::BadCheckpoint("implausible header values".into()));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let input_dim = patch_size * patch_size;

    // expected shape table in declaration order
    let mut expected: Vec<(usize, usize)> = Vec::new();
    let push_layer = |expected: &mut Vec<(usize, usize)>, out: usize, inp: usize| {
        expected.push((out, inp));
        expected.push((out, 1));
    };
    let mut prev = input_dim;
    for &h in &hidden {
        push_layer(&mut expected, h, prev);
        prev = h;
    }
    push_layer(&mut expected, latent_dim, prev);
    push_layer(&mut expected, latent_dim, prev);
    let mut dprev = latent_dim;
    for &h in hidden.iter().rev() {
        push_layer(&mut expected, h, dprev);
        dprev = h;
    }
    push_layer(&mut expected, input_dim, dprev);

    let n_entries = r.u32()? as usize;
    if n_entries != expected.len() {
        return Err(VaeError::BadCheckpoint(format!(
            "shape table has {} entries, architecture needs {}",
            n_entries,
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(n_entries);
    for i in 0..n_entries {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != expected[i] {
            return Err(VaeError::BadCheckpoint(format!(
                "shape entry {i} is {rows}x{cols}, expected {}x{}",
                expected[i].0, expected[i].1
            )));
        }
        shapes.push((rows, cols));
    }

    let mut layers = Vec::with_capacity(n_entries / 2);
    let mut i = 0;
    while i < n_entries {
        let (wr, wc) = shapes[i];
        let w = Mat::from_vec(wr, wc, r.f64s(wr * wc)?);
        let (br, _) = shapes[i + 1];
        let b = r.f64s(br)?;
        layers.push(Layer { w, b });
        i += 2;
    }
    if r.pos != bytes.len() {
        return Err(VaeError::BadCheckpoint("trailing bytes after data".into()));
    }

    let mut it = layers.into_iter();
    let encoder: Vec<Layer> = (0..hidden.len()).map(|_| it.next().unwrap()).collect();
    let head_mu = it.next().unwrap();
    let head_logvar = it.next().unwrap();
    let decoder: Vec<Layer> = (0..hidden.len()).map(|_| it.next().unwrap()).collect();
    let output = it.next().unwrap();

    Ok((
        VaeParams {
            input_dim,
            latent_dim,
            hidden,
            encoder,
            head_mu,
            head_logvar,
            decoder,
            output,
        },
        patch_size,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::patch::extract_patches;

    fn toy_params(rng_seed: u64) -> VaeParams {
        let mut rng = Rng64::new(rng_seed);
        VaeParams::init(6, &[8, 4, 3], 2, &mut rng)
    }

    fn zero_params(d: usize, hidden: &[usize], l: usize) -> VaeParams {
        let mut rng = Rng64::new(1);
        let mut p = VaeParams::init(d, hidden, l, &mut rng);
        for layer in p.layers_mut() {
            layer.w.fill(0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        p
    }

    /// Mutable access to one scalar parameter, counting weights before
    /// biases within layer `li`.
    fn param_entry_mut(p: &mut VaeParams, li: usize, e: usize) -> &mut f64 {
        let layer = p.layers_mut().into_iter().nth(li).expect("layer index");
        let nw = layer.w.data.len();
        if e < nw {
            &mut layer.w.data[e]
        } else {
            &mut layer.b[e - nw]
        }
    }

    #[test]
    fn zero_parameters_encode_to_zero() {
        let p = zero_params(4, &[3], 2);
        let (mu, lv, _) = encode(&p, &[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(lv, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_is_deterministic_and_checks_shape() {
        let p = toy_params(3);
        let x = [0.1, 0.9, 0.5, 0.3, 0.7, 0.2];
        let (mu1, lv1, _) = encode(&p, &x).unwrap();
        let (mu2, lv2, _) = encode(&p, &x).unwrap();
        assert_eq!(mu1, mu2);
        assert_eq!(lv1, lv2);
        assert!(matches!(
            encode(&p, &[0.0; 5]),
            Err(VaeError::ShapeMismatch(_))
        ));
    }

    // Hand evaluation of one affine layer + ReLU + affine head, D = L = 2.
    #[test]
    fn single_layer_toy_matches_hand_computation() {
        let mut p = zero_params(2, &[2], 2);
        // hidden layer: W = [[1, 2], [-1, 1]], b = (0.5, -0.25)
        p.encoder[0].w = Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 1.0]);
        p.encoder[0].b = vec![0.5, -0.25];
        // mu head identity, logvar head = 0
        p.head_mu.w = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = [1.0, 0.5];
        // pre = (1*1 + 2*0.5 + 0.5, -1*1 + 1*0.5 - 0.25) = (2.5, -0.75)
        // relu -> (2.5, 0), mu = (2.5, 0)
        let (mu, lv, _) = encode(&p, &x).unwrap();
        assert_eq!(mu, vec![2.5, 0.0]);
        assert_eq!(lv, vec![0.0, 0.0]);
    }

    #[test]
    fn reparameterize_hand_cases() {
        // eps = 0 -> z = mu
        assert_eq!(
            reparameterize(&[1.5, -2.0], &[0.3, -1.0], &[0.0, 0.0]).unwrap(),
            vec![1.5, -2.0]
        );
        // sigma = 2 via log_var = 2 ln 2, eps = 0.5 -> z = 1 + 2*0.5 = 2
        let z = reparameterize(&[1.0], &[2.0 * 2.0f64.ln()], &[0.5]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15);
        assert!(matches!(
            reparameterize(&[0.0], &[0.0, 0.0], &[0.0]),
            Err(VaeError::ShapeMismatch(_))
        ));
    }

    // Monte Carlo oracle: empirical mean and std of z match (mu, sigma).
    #[test]
    fn reparameterize_monte_carlo_moments()
    {
        let mu = [0.7, -1.2];
        let log_var = [0.5, -0.8];
        let sigma: Vec<f64> = log_var.iter().map(|lv: &f64| (lv / 2.0).exp()).collect();
        let mut rng = Rng64::new(77);
        let n = 1_000_000usize;
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        let mut eps = [0.0f64; 2];
        for _ in 0..n {
            rng.fill_normal(&mut eps);
            let z = reparameterize(&mu, &log_var, &eps).unwrap();
            for k in 0..2 {
                sum[k] += z[k];
                sumsq[k] += z[k] * z[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let std = (sumsq[k] / n as f64 - mean * mean).sqrt();
            assert!(
                (mean - mu[k]).abs() < 0.01 * mu[k].abs().max(1.0),
                "mean[{k}] = {mean}"
            );
            assert!((std - sigma[k]).abs() / sigma[k] < 0.01, "std[{k}] = {std}");
        }
    }

    #[test]
    fn zero_decoder_outputs_one_half() {
        let p = zero_params(4, &[3], 2);
        let out = decode(&p, &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5; 4]);
    }

    // sigmoid(ln 3) = 3/4 by hand.
    #[test]
    fn decoder_toy_matches_logistic() {
        let mut p = zero_params(1, &[], 1);
        p.output.w = Mat::from_vec(1, 1, vec![1.0]);
        assert_eq!(decode(&p, &[0.0]).unwrap(), vec![0.5]);
        let out = decode(&p, &[3.0f64.ln()]).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn decode_output_strictly_inside_unit_interval() {
        let p = toy_params(9);
        let out = decode(&p, &[5.0, -5.0]).unwrap();
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn kl_closed_form_hand_values() {
        assert_eq!(kl_closed_form(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        // -1/2 (1 + 0 - 1 - 1) = 1/2
        assert_eq!(kl_closed_form(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn kl_closed_form_nonnegative_and_zero_only_at_prior() {
        let mut rng = Rng64::new(13);
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let kl = kl_closed_form(&mu, &lv);
            assert!(kl >= 0.0, "kl = {kl} at mu={mu:?} lv={lv:?}");
            if mu.iter().any(|&m| m.abs() > 1e-3) || lv.iter().any(|&v| v.abs() > 1e-3) {
                assert!(kl > 0.0);
            }
        }
    }

    // MC oracle for KL(N(mu, s^2) || N(0,1)): mean of log q - log p over
    // draws from q.
    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let mut rng = Rng64::new(101);
        let mu = [0.8];
        let lv = [0.6];
        let s = (lv[0] / 2.0f64).exp();
        let n = 1_000_000usize;
        let mut acc = 0.0;
        let mut pair = [0.0f64; 2];
        for _ in 0..n / 2 {
            rng.fill_normal(&mut pair);
            for e in pair {
                let z = mu[0] + s * e;
                let log_q = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * lv[0]
                    - 0.5 * (z - mu[0]) * (z - mu[0]) / (s * s);
                let log_p = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        let exact = kl_closed_form(&mu, &lv);
        assert!(
            (mc - exact).abs() / exact < 0.01,
            "mc = {mc}, closed form = {exact}"
        );
    }

    // Zero params, x = 0, D = 4: decoder emits 0.5 everywhere so
    // recon = 4 ln 2 and the KL term vanishes.
    #[test]
    fn nelbo_zero_params_hand_value() {
        let p = zero_params(4, &[3], 2);
        let (loss, parts) = nelbo(&p, &[0.0; 4], &[0.0; 2]).unwrap();
        assert!((parts.recon - 4.0 * 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(parts.kl, 0.0);
        assert_eq!(loss, parts.recon + parts.kl);
    }

    // Matching probabilities sit at the entropy floor D ln 2 when x = 0.5.
    #[test]
    fn nelbo_entropy_floor_at_half() {
        let p = zero_params(6, &[4], 2);
        let (_, parts) = nelbo(&p, &[0.5; 6], &[0.0; 2]).unwrap();
        assert!((parts.recon - 6.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nelbo_nonnegative_over_random_configs() {
        let mut rng = Rng64::new(55);
        for trial in 0..1000 {
            let p = toy_params(trial + 1);
            let x: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let mut eps = vec![0.0; 2];
            rng.fill_normal(&mut eps);
            let (loss, parts) = nelbo(&p, &x, &eps).unwrap();
            assert!(loss >= 0.0, "loss {loss} at trial {trial}");
            assert_eq!(loss, parts.recon + parts.kl);
        }
    }

    /// Central finite differences through the whole parameter vector.
    /// Inputs sit away from the ReLU/clamp kinks so the loss is smooth at
    /// the test point (h = 1e-5 must not straddle a non-differentiability).
    fn finite_difference_check(prior: &Prior, seed: u64) -> f64 {
        let params = toy_params(seed);
        let mut rng = Rng64::new(seed ^ 0xABCD);
        let x: Vec<f64> = (0..6).map(|_| 0.15 + 0.7 * rng.next_f64()).collect();
        let mut eps = vec![0.0; 2];
        rng.fill_normal(&mut eps);

        let (grads, _, _) = backward_with_prior(&params, prior, &x, &eps).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;

        let n_layers = params.layers().len();
        for li in 0..n_layers {
            let entries = {
                let l = params.layers()[li];
                l.w.data.len() + l.b.len()
            };
            for e in 0..entries {
                let mut plus = params.clone();
                let mut minus = params.clone();
                *param_entry_mut(&mut plus, li, e) += h;
                *param_entry_mut(&mut minus, li, e) -= h;
                let (lp, _) = nelbo_with_prior(&plus, prior, &x, &eps).unwrap();
                let (lm, _) = nelbo_with_prior(&minus, prior, &x, &eps).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = {
                    let l = grads.layers()[li];
                    if e < l.w.data.len() {
                        l.w.data[e]
                    } else {
                        l.b[e - l.w.data.len()]
                    }
                };
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max((analytic - numeric).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let err = finite_difference_check(&Prior::StandardNormal, 17);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn mog_prior_gradients_match_finite_differences() {
        let prior = Prior::MixtureOfGaussians(MogPrior::default_two_component());
        let err = finite_difference_check(&prior, 24);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    // With zero input the decoder-head bias gradient is xhat - x = 0.5.
    #[test]
    fn output_bias_gradient_is_sigmoid_bce_form() {
        let p = zero_params(4, &[3], 2);
        let (grads, _, _) = backward(&p, &[0.0; 4], &[0.0; 2]).unwrap();
        for &g in &grads.output.b {
            assert!((g - 0.5).abs() < 1e-15);
        }
        // and for a general x: gradient = xhat - x elementwise (xhat = 0.5)
        let x = [0.1, 0.9, 0.3, 1.0];
        let (grads, _, _) = backward(&p, &x, &[0.0; 2]).unwrap();
        for (g, &t) in grads.output.b.iter().zip(&x) {
            assert!((g - (0.5 - t)).abs() < 1e-15);
        }
    }

    // KL part differentiates to mu through the mu head bias when the
    // reconstruction path contributes nothing there.
    #[test]
    fn mu_head_gradient_carries_kl_term() {
        let mut p = zero_params(4, &[3], 2);
        // bias the mu head so mu is nonzero while decoder stays all-zero
        p.head_mu.b = vec![0.7, -0.3];
        let (grads, _, _) = backward(&p, &[0.5; 4], &[0.0; 2]).unwrap();
        // decoder weights are zero, so dz contributes nothing: grad = mu
        assert!((grads.head_mu.b[0] - 0.7).abs() < 1e-15);
        assert!((grads.head_mu.b[1] + 0.3).abs() < 1e-15);
    }

    fn tiny_dataset(n: usize, patch: usize, seed: u64) -> PatchDataset {
        // synthetic patches with bright/dark structure
        let mut rng = Rng64::new(seed);
        let dim = patch * 8;
        let data: Vec<f64> = (0..dim * dim)
            .map(|i| {
                let bright = (i / dim) % 2 == 0;
                let base = if bright { 0.8 } else { 0.2 };
                (base + 0.1 * rng.next_f64()).clamp(0.0, 1.0)
            })
            .collect();
        let img = Image::new(dim, dim, data, 1.0, (0.0, 0.0)).unwrap();
        let mut ds = extract_patches(&img, patch, patch / 2).unwrap();
        ds.patches.truncate(n);
        ds.geometry.truncate(n);
        ds
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_flat_trace() {
        let ds = tiny_dataset(20, 4, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.0,
            latent_dim: 2,
            hidden: vec![6],
            seed: 9,
            ..TrainConfig::default()
        };
        let (params, trace) = train(&ds, &cfg).unwrap();
        let mut rng = Rng64::new(cfg.seed);
        let fresh = VaeParams::init(16, &[6], 2, &mut rng);
        assert_eq!(params, fresh);
        assert_eq!(trace.len(), 3);
        assert_eq!(trace[0], trace[1]);
        assert_eq!(trace[1], trace[2]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(32, 4, 6);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-2,
            latent_dim: 3,
            hidden: vec![8],
            seed: 42,
            ..TrainConfig::default()
        };
        let (p1, t1) = train(&ds, &cfg).unwrap();
        let (p2, t2) = train(&ds, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = tiny_dataset(64, 4, 7);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 5e-2,
            latent_dim: 2,
            hidden: vec![8],
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&ds, &cfg).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        assert!(
            trace.last().unwrap() < &trace[0],
            "trace did not descend: {trace:?}"
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = PatchDataset {
            patch_size: 4,
            stride: 2,
            patches: vec![],
            geometry: vec![],
            source_dims: (8, 8),
        };
        assert!(matches!(
            train(&ds, &TrainConfig::default()),
            Err(VaeError::EmptyDataset)
        ));
    }

    #[test]
    fn latent_stats_matches_per_patch_encode_and_permutation() {
        let ds = tiny_dataset(9, 4, 8);
        let mut rng = Rng64::new(2);
        let params = VaeParams::init(16, &[6], 2, &mut rng);
        let stats = latent_stats(&params, &ds).unwrap();
        assert_eq!(stats.mu.len(), 9);
        for (i, patch) in ds.patches.iter().enumerate() {
            let (mu, lv, _) = encode(&params, patch).unwrap();
            assert_eq!(stats.mu[i], mu);
            assert_eq!(stats.log_var[i], lv);
        }
        // permuting the dataset permutes outputs identically
        let mut perm = ds.clone();
        perm.patches.reverse();
        perm.geometry.reverse();
        let rstats = latent_stats(&params, &perm).unwrap();
        for i in 0..9 {
            assert_eq!(rstats.mu[i], stats.mu[8 - i]);
            assert_eq!(rstats.geometry[i], stats.geometry[8 - i]);
        }
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_mismatches() {
        let mut rng = Rng64::new(31);
        let params = VaeParams::init(16, &[10, 5], 3, &mut rng);
        let bytes = save_checkpoint(&params, 4).unwrap();
        let (back, ps) = load_checkpoint(&bytes).unwrap();
        assert_eq!(ps, 4);
        assert_eq!(back, params);

        // corrupt the shape table
        let mut bad = bytes.clone();
        bad[16] ^= 0xFF;
        assert!(load_checkpoint(&bad).is_err());

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 9);
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(VaeError::BadCheckpoint(_))
        ));

        assert!(matches!(
            load_checkpoint(b"NOPE"),
            Err(VaeError::BadCheckpoint(_))
        ));
    }
}
