//! Denoising variational autoencoder.
//!
//! The encoder reads a noise-corrupted input and produces a diagonal
//! Gaussian `(mu, log sigma^2)`; one reparameterized sample
//! `z = mu + exp(logvar / 2) * eps` is decoded and compared with the clean
//! input under a unit-variance Gaussian likelihood. The loss is the negative
//! ELBO, averaged over the batch:
//!
//! ```text
//! recon = mean_b 1/2 ||x_b - decode(z_b)||^2
//! kl    = mean_b 1/2 sum_d (mu^2 + exp(logvar) - 1 - logvar)
//! ```

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AdamConfig, AdamState, DenseLayer, GradientTape, LayerGrad};
use crate::rng;

pub const DVAE_MAGIC: &[u8; 8] = b"DVAE0001";

#[derive(Debug, Clone, PartialEq)]
pub struct DvaeModel {
    pub encoder_trunk: Vec<DenseLayer>,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Vec<DenseLayer>,
    pub latent_dim: usize,
    pub noise_variance: f64,
    pub input_dim: usize,
}

impl DvaeModel {
    /// Encoder `input -> hidden[0] -> ... -> hidden[last]` (ReLU), linear
    /// heads to `latent_dim`, decoder mirroring the hidden sizes back to a
    /// linear output of width `input_dim`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dims: &[usize],
        latent_dim: usize,
        noise_variance: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::config("input_dim and latent_dim must be positive"));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::config(format!(
                "noise_variance must be a finite nonnegative number, got {noise_variance}"
            )));
        }
        let mut trunk = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_dims {
            trunk.push(DenseLayer::init(prev, h, Activation::Relu, rng));
            prev = h;
        }
        let mu_head = DenseLayer::init(prev, latent_dim, Activation::Identity, rng);
        let logvar_head = DenseLayer::init(prev, latent_dim, Activation::Identity, rng);
        let mut decoder = Vec::new();
        let mut prev = latent_dim;
        for &h in hidden_dims.iter().rev() {
            decoder.push(DenseLayer::init(prev, h, Activation::Relu, rng));
            prev = h;
        }
        decoder.push(DenseLayer::init(prev, input_dim, Activation::Identity, rng));
        Ok(DvaeModel {
            encoder_trunk: trunk,
            mu_head,
            logvar_head,
            decoder,
            latent_dim,
            noise_variance,
            input_dim,
        })
    }

    /// All layers in optimizer order: trunk, mu head, logvar head, decoder.
    pub fn layers(&self) -> Vec<&DenseLayer> {
        self.encoder_trunk
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(self.decoder.iter())
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.encoder_trunk
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(self.decoder.iter_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Encoder `(mu, logvar)` for a batch, no noise and no sampling.
    pub fn encode(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let h = nn::infer(&self.encoder_trunk, x)?;
        let mu = nn::infer(std::slice::from_ref(&self.mu_head), &h)?;
        let lv = nn::infer(std::slice::from_ref(&self.logvar_head), &h)?;
        Ok((mu, lv))
    }

    pub fn decode(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        nn::infer(&self.decoder, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Closed-form KL of `N(mu, exp(logvar))` from `N(0, I)`, averaged over rows.
pub fn kl_divergence(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let n = mu.nrows().max(1) as f64;
    let mut total = 0.0;
    for (&m, &lv) in mu.iter().zip(logvar.iter()) {
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    total / n
}

/// Everything recorded by one forward evaluation of the negative ELBO.
#[derive(Debug, Clone)]
pub struct ElboPass {
    pub terms: LossTerms,
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    eps: Array2<f64>,
    residual: Array2<f64>,
    trunk_tape: GradientTape,
    mu_tape: GradientTape,
    logvar_tape: GradientTape,
    decoder_tape: GradientTape,
}

impl ElboPass {
    pub fn relu_pattern(&self, model: &DvaeModel) -> Vec<bool> {
        let mut p = self.trunk_tape.relu_pattern(&model.encoder_trunk);
        p.extend(self.decoder_tape.relu_pattern(&model.decoder));
        p
    }
}

/// Negative ELBO with a caller-supplied standard-normal sample `eps`.
pub fn elbo_forward(
    model: &DvaeModel,
    x_clean: &Array2<f64>,
    x_noisy: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<ElboPass> {
    if x_clean.dim() != x_noisy.dim() {
        return Err(Error::shape("clean and noisy batches differ in shape"));
    }
    if x_clean.ncols() != model.input_dim {
        return Err(Error::shape(format!(
            "model expects {} features, got {}",
            model.input_dim,
            x_clean.ncols()
        )));
    }
    let b = x_clean.nrows();
    if eps.dim() != (b, model.latent_dim) {
        return Err(Error::shape("noise sample does not match batch x latent_dim"));
    }
    let (h, trunk_tape) = nn::forward(&model.encoder_trunk, x_noisy)?;
    let (mu, mu_tape) = nn::forward(std::slice::from_ref(&model.mu_head), &h)?;
    let (logvar, logvar_tape) = nn::forward(std::slice::from_ref(&model.logvar_head), &h)?;
    let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * eps);
    let (xhat, decoder_tape) = nn::forward(&model.decoder, &z)?;
    let residual = xhat - x_clean;
    let recon = 0.5 * residual.iter().map(|r| r * r).sum::<f64>() / b.max(1) as f64;
    let kl = kl_divergence(&mu, &logvar);
    let terms = LossTerms {
        loss: recon + kl,
        recon,
        kl,
    };
    Ok(ElboPass {
        terms,
        mu,
        logvar,
        eps: eps.clone(),
        residual,
        trunk_tape,
        mu_tape,
        logvar_tape,
        decoder_tape,
    })
}

/// Exact parameter gradients of the recorded loss, in [`DvaeModel::layers`]
/// order.
pub fn elbo_backward(model: &DvaeModel, pass: &ElboPass) -> Result<Vec<LayerGrad>> {
    let b = pass.mu.nrows().max(1) as f64;
    let d_xhat = &pass.residual / b;
    let (dec_grads, d_z) = nn::backward(&model.decoder, &pass.decoder_tape, &d_xhat)?;

    let sigma = pass.logvar.mapv(|v| (0.5 * v).exp());
    let d_mu = &d_z + &(&pass.mu / b);
    let d_logvar = &d_z * &pass.eps * &sigma * 0.5 + &(pass.logvar.mapv(|v| v.exp() - 1.0) * (0.5 / b));

    let (mu_grads, d_h_mu) = nn::backward(
        std::slice::from_ref(&model.mu_head),
        &pass.mu_tape,
        &d_mu,
    )?;
    let (lv_grads, d_h_lv) = nn::backward(
        std::slice::from_ref(&model.logvar_head),
        &pass.logvar_tape,
        &d_logvar,
    )?;
    let d_h = d_h_mu + d_h_lv;
    let (trunk_grads, _) = nn::backward(&model.encoder_trunk, &pass.trunk_tape, &d_h)?;

    let mut grads = trunk_grads;
    grads.extend(mu_grads);
    grads.extend(lv_grads);
    grads.extend(dec_grads);
    Ok(grads)
}

/// Sample `eps` and evaluate the negative ELBO on one batch.
pub fn elbo_loss<R: Rng + ?Sized>(
    x_clean: &Array2<f64>,
    x_noisy: &Array2<f64>,
    model: &DvaeModel,
    rng: &mut R,
) -> Result<ElboPass> {
    let eps = Array2::from_shape_simple_fn((x_clean.nrows(), model.latent_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    elbo_forward(model, x_clean, x_noisy, &eps)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub noise_variance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            hidden_dims: vec![512, 128],
            latent_dim: 5,
            noise_variance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Train from a fresh initialization. Each minibatch gets fresh input noise
/// with variance `noise_variance`; the reconstruction target is the clean
/// input.
pub fn train(features: &Array2<f64>, cfg: &TrainConfig) -> Result<(DvaeModel, Vec<EpochLoss>)> {
    let (n, v) = features.dim();
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be at least 1"));
    }
    if n < cfg.batch_size {
        return Err(Error::config(format!(
            "{n} training rows is fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("DVAE training input contains non-finite values"));
    }
    let mut init_rng = rng::seeded(rng::derive(cfg.seed, "dvae-init"));
    let mut model = DvaeModel::new(
        v,
        &cfg.hidden_dims,
        cfg.latent_dim,
        cfg.noise_variance,
        &mut init_rng,
    )?;
    let curve = fit(&mut model, features, cfg)?;
    Ok((model, curve))
}

/// Continue training `model` in place.
pub fn fit(model: &mut DvaeModel, features: &Array2<f64>, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    let n = features.nrows();
    if features.ncols() != model.input_dim {
        return Err(Error::shape(format!(
            "model expects {} features, got {}",
            model.input_dim,
            features.ncols()
        )));
    }
    let mut rng = rng::seeded(rng::derive(cfg.seed, "dvae-train"));
    let mut opt = AdamState::new(
        model.layers(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let noise_sd = model.noise_variance.sqrt();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms {
            loss: 0.0,
            recon: 0.0,
            kl: 0.0,
        };
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = features.select(Axis(0), chunk);
            let noise = Array2::from_shape_simple_fn(x.raw_dim(), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            let x_noisy = &x + &(noise * noise_sd);
            let pass = elbo_loss(&x, &x_noisy, model, &mut rng)?;
            if !pass.terms.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (recon {}, kl {})",
                    pass.terms.recon, pass.terms.kl
                )));
            }
            let grads = elbo_backward(model, &pass)?;
            opt.step(&mut model.layers_mut(), &grads).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
            sums.loss += pass.terms.loss;
            sums.recon += pass.terms.recon;
            sums.kl += pass.terms.kl;
            batches += 1;
        }
        let k = batches as f64;
        let e = EpochLoss {
            epoch,
            loss: sums.loss / k,
            recon: sums.recon / k,
            kl: sums.kl / k,
        };
        log::debug!("epoch {epoch}: loss {:.5} (recon {:.5}, kl {:.5})", e.loss, e.recon, e.kl);
        curve.push(e);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Extraction

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl LatentFeatures {
    /// Classifier input `[mu | logvar]`, width `2 * latent_dim`.
    pub fn to_matrix(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.mu.view(), self.logvar.view()])
            .expect("same row count")
    }
}

/// Deterministic latent parameters of clean inputs.
pub fn extract(model: &DvaeModel, features: &Array2<f64>) -> Result<LatentFeatures> {
    let (mu, logvar) = model.encode(features)?;
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::data("encoder produced non-finite latent parameters"));
    }
    Ok(LatentFeatures { mu, logvar })
}

// ---------------------------------------------------------------------------
// Serialization

pub fn encode_model(m: &DvaeModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(DVAE_MAGIC);
    w.u64(m.latent_dim as u64);
    w.f64(m.noise_variance);
    w.u64(m.input_dim as u64);
    nn::write_layers(&mut w, &m.encoder_trunk);
    nn::write_layers(&mut w, std::slice::from_ref(&m.mu_head));
    nn::write_layers(&mut w, std::slice::from_ref(&m.logvar_head));
    nn::write_layers(&mut w, &m.decoder);
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<DvaeModel> {
    let mut r = Reader::new(bytes, "DVAE model");
    r.expect_magic(DVAE_MAGIC)?;
    let latent_dim = r.dim()?;
    let noise_variance = r.f64()?;
    let input_dim = r.dim()?;
    let encoder_trunk = nn::read_layers(&mut r)?;
    let single = |r: &mut Reader, what: &str| -> Result<DenseLayer> {
        let mut v = nn::read_layers(r)?;
        if v.len() != 1 {
            return Err(Error::data(format!("{what} must be a single layer")));
        }
        Ok(v.remove(0))
    };
    let mu_head = single(&mut r, "mu head")?;
    let logvar_head = single(&mut r, "logvar head")?;
    let decoder = nn::read_layers(&mut r)?;
    r.finish()?;
    let m = DvaeModel {
        encoder_trunk,
        mu_head,
        logvar_head,
        decoder,
        latent_dim,
        noise_variance,
        input_dim,
    };
    validate_shapes(&m)?;
    Ok(m)
}

fn validate_shapes(m: &DvaeModel) -> Result<()> {
    let mut prev = m.input_dim;
    for l in &m.encoder_trunk {
        if l.input_dim() != prev {
            return Err(Error::data("encoder layer widths do not chain"));
        }
        prev = l.output_dim();
    }
    for head in [&m.mu_head, &m.logvar_head] {
        if head.input_dim() != prev || head.output_dim() != m.latent_dim {
            return Err(Error::data("latent head shape mismatch"));
        }
    }
    let mut prev = m.latent_dim;
    for l in &m.decoder {
        if l.input_dim() != prev {
            return Err(Error::data("decoder layer widths do not chain"));
        }
        prev = l.output_dim();
    }
    if prev != m.input_dim {
        return Err(Error::data("decoder output width differs from input_dim"));
    }
    Ok(())
}

pub fn save_model(path: &Path, m: &DvaeModel) -> Result<()> {
    std::fs::write(path, encode_model(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DvaeModel> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_model(seed: u64) -> DvaeModel {
        DvaeModel::new(6, &[8, 4], 3, 0.1, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn kl_of_prior_is_zero() {
        assert_eq!(kl_divergence(&Array2::zeros((4, 5)), &Array2::zeros((4, 5))), 0.0);
    }

    #[test]
    fn kl_of_unit_shift() {
        let mu = array![[1.0, 0.0, 0.0, 0.0, 0.0]];
        assert!((kl_divergence(&mu, &Array2::zeros((1, 5))) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_encoder_gives_prior_parameters() {
        let mut m = small_model(0);
        for l in m.encoder_trunk.iter_mut().chain([&mut m.mu_head, &mut m.logvar_head]) {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i + j) as f64);
        let lat = extract(&m, &x).unwrap();
        assert!(lat.mu.iter().all(|&v| v == 0.0));
        assert!(lat.logvar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let m = small_model(1);
        let x = Array2::from_shape_fn((7, 6), |(i, j)| ((i * 3 + j) as f64).sin());
        let a = extract(&m, &x).unwrap();
        let b = extract(&m, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_matrix().dim(), (7, 6));
        assert!(extract(&m, &Array2::zeros((2, 5))).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = small_model(2);
        let mut r = rng::seeded(9);
        let x = Array2::from_shape_simple_fn((3, 6), || r.sample::<f64, _>(StandardNormal));
        let xn = &x + &Array2::from_shape_simple_fn((3, 6), || 0.3 * r.sample::<f64, _>(StandardNormal));
        let eps = Array2::from_shape_simple_fn((3, 3), || r.sample::<f64, _>(StandardNormal));
        let pass = elbo_forward(&m, &x, &xn, &eps).unwrap();
        let grads = elbo_backward(&m, &pass).unwrap();
        let h = 1e-6;
        let n_layers = m.layers().len();
        let mut worst = 0.0f64;
        for li in 0..n_layers {
            let (rows, cols) = m.layers()[li].weights.dim();
            for (i, j) in [(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let eval = |delta: f64| {
                    let mut mm = m.clone();
                    mm.layers_mut()[li].weights[[i, j]] += delta;
                    elbo_forward(&mm, &x, &xn, &eps).unwrap().terms.loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[li].weights[[i, j]];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
            }
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.layers_mut()[li].bias[0] += delta;
                elbo_forward(&mm, &x, &xn, &eps).unwrap().terms.loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[li].bias[0];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut r = rng::seeded(3);
        let x = Array2::from_shape_simple_fn((20, 6), || r.sample::<f64, _>(StandardNormal));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            hidden_dims: vec![8],
            latent_dim: 2,
            seed: 5,
            ..Default::default()
        };
        let (a, ca) = train(&x, &cfg).unwrap();
        let (b, cb) = train(&x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 3);
    }

    #[test]
    fn memorizes_single_vector_without_noise() {
        let v: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.7).sin()).collect();
        let x = Array2::from_shape_fn((50, 12), |(_, j)| v[j]);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 10,
            hidden_dims: vec![16],
            latent_dim: 2,
            noise_variance: 0.0,
            seed: 1,
            learning_rate: 1e-3,
        };
        let (_, curve) = train(&x, &cfg).unwrap();
        let first = curve[0].recon;
        let last = curve.last().unwrap().recon;
        assert!(last < 1e-2 * first, "recon {first} -> {last}");
    }

    #[test]
    fn train_rejects_small_input() {
        let x = Array2::zeros((3, 4));
        let cfg = TrainConfig {
            batch_size: 8,
            ..Default::default()
        };
        assert!(matches!(train(&x, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn model_roundtrip() {
        let m = small_model(4);
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], DVAE_MAGIC);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
    }
}
