//! Variational autoencoder over binary codes.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Activation, Fnn, FnnCache, FnnGrad, Matrix, Params, Vector};
use crate::error::{Error, Result};

const LOGVAR_MIN: f64 = -10.0;
const LOGVAR_MAX: f64 = 10.0;
const LOGIT_CLIP: f64 = 30.0;

/// The encoder emits `[mu, logvar]` side by side; the decoder maps a latent
/// sample back to per-bit logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub encoder: Fnn,
    pub decoder: Fnn,
    pub latent_dim: usize,
}

#[derive(Clone, Debug)]
pub struct VaeForward {
    pub mu: Matrix,
    /// Clamped log-variance.
    pub logvar: Matrix,
    pub eps: Matrix,
    pub z: Matrix,
    pub logits: Matrix,
    /// Per-row binary cross-entropy of the reconstruction.
    pub recon: Vector,
    /// Per-row KL divergence from the unit Gaussian.
    pub kl: Vector,
    raw_logvar: Matrix,
    enc_cache: FnnCache,
    dec_cache: FnnCache,
}

impl VaeForward {
    /// Batch mean of reconstruction plus KL.
    pub fn loss(&self) -> f64 {
        (self.recon.sum() + self.kl.sum()) / self.mu.nrows() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeGrad {
    pub encoder: FnnGrad,
    pub decoder: FnnGrad,
}

impl Params for Vae {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }
}

impl Params for VaeGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }
}

fn bce_with_logits(logit: f64, target: f64) -> f64 {
    let l = logit.clamp(-LOGIT_CLIP, LOGIT_CLIP);
    l.max(0.0) - target * l + (-l.abs()).exp().ln_1p()
}

fn bce_grad(logit: f64, target: f64) -> f64 {
    if logit.abs() > LOGIT_CLIP {
        return 0.0;
    }
    1.0 / (1.0 + (-logit).exp()) - target
}

impl Vae {
    /// Encoder `[input, hidden..., 2 * latent]`, decoder mirrored, ELU hidden units.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend(hidden.iter().rev());
        dec.push(input_dim);
        Vae {
            encoder: Fnn::new(&enc, Activation::Elu, Activation::Identity, rng),
            decoder: Fnn::new(&dec, Activation::Elu, Activation::Identity, rng),
            latent_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn sample_eps(&self, rows: usize, rng: &mut impl Rng) -> Matrix {
        Array2::from_shape_simple_fn((rows, self.latent_dim), || rng.sample(StandardNormal))
    }

    /// Latent means; this is the deterministic encoding used at inference.
    pub fn latent_mean(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.encoder.infer(x)?;
        Ok(h.slice(s![.., ..self.latent_dim]).to_owned())
    }

    /// Full pass with `z = mu + exp(logvar / 2) * eps`.
    pub fn forward(&self, x: &Matrix, eps: &Matrix) -> Result<VaeForward> {
        let l = self.latent_dim;
        if eps.dim() != (x.nrows(), l) {
            return Err(Error::shape(format!(
                "noise shape {:?} does not match batch {} x latent {l}",
                eps.dim(),
                x.nrows()
            )));
        }
        let (h, enc_cache) = self.encoder.forward(x)?;
        let mu = h.slice(s![.., ..l]).to_owned();
        let raw_logvar = h.slice(s![.., l..]).to_owned();
        let logvar = raw_logvar.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * eps);
        let (logits, dec_cache) = self.decoder.forward(&z)?;

        let mut recon = Array1::zeros(x.nrows());
        for (i, (lr, xr)) in logits.outer_iter().zip(x.outer_iter()).enumerate() {
            recon[i] = lr.iter().zip(xr).map(|(&a, &t)| bce_with_logits(a, t)).sum();
        }
        let kl_terms = ndarray::Zip::from(&mu)
            .and(&logvar)
            .map_collect(|&m, &lv| -0.5 * (1.0 + lv - m * m - lv.exp()));
        let kl = kl_terms.sum_axis(Axis(1));
        Ok(VaeForward {
            mu,
            logvar,
            eps: eps.clone(),
            z,
            logits,
            recon,
            kl,
            raw_logvar,
            enc_cache,
            dec_cache,
        })
    }

    /// Gradient of `weight * fwd.loss() + <grad_z, z>`.
    ///
    /// `grad_z` carries the gradient from whatever consumes the latent sample
    /// downstream; pass `None` when only the VAE loss matters.
    pub fn backward(&self, x: &Matrix, fwd: &VaeForward, weight: f64, grad_z: Option<&Matrix>) -> Result<VaeGrad> {
        let n = x.nrows() as f64;
        let scale = weight / n;

        let mut dlogits = ndarray::Zip::from(&fwd.logits)
            .and(x)
            .map_collect(|&a, &t| bce_grad(a, t));
        dlogits *= scale;
        let (dec_grad, mut dz) = self.decoder.backward(&fwd.dec_cache, &dlogits)?;
        if let Some(g) = grad_z {
            if g.raw_dim() != dz.raw_dim() {
                return Err(Error::shape("latent gradient shape mismatch"));
            }
            dz += g;
        }

        let l = self.latent_dim;
        let mut dh = Array2::zeros((x.nrows(), 2 * l));
        for i in 0..x.nrows() {
            for j in 0..l {
                let m = fwd.mu[[i, j]];
                let lv = fwd.logvar[[i, j]];
                let sd = (0.5 * lv).exp();
                dh[[i, j]] = dz[[i, j]] + scale * m;
                let raw = fwd.raw_logvar[[i, j]];
                dh[[i, l + j]] = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                    dz[[i, j]] * 0.5 * sd * fwd.eps[[i, j]] + scale * 0.5 * (lv.exp() - 1.0)
                } else {
                    0.0
                };
            }
        }
        let (enc_grad, _) = self.encoder.backward(&fwd.enc_cache, &dh)?;
        Ok(VaeGrad {
            encoder: enc_grad,
            decoder: dec_grad,
        })
    }

    pub fn zero_grad(&self) -> VaeGrad {
        VaeGrad {
            encoder: self.encoder.zero_grad(),
            decoder: self.decoder.zero_grad(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binary_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Array2::from_shape_simple_fn((rows, cols), || if rng.random::<bool>() { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_matches_direct_formula() {
        for &(a, t) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 1.0), (-0.7, 1.0)] {
            let p: f64 = 1.0 / (1.0 + f64::exp(-a));
            let direct = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_with_logits(a, t) - direct).abs() < 1e-12);
        }
        assert!(bce_with_logits(1e6, 0.0).is_finite());
        assert_eq!(bce_grad(1e6, 0.0), 0.0);
    }

    #[test]
    fn zero_noise_gives_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vae = Vae::new(8, &[6, 5], 3, &mut rng);
        let x = binary_batch(4, 8, &mut rng);
        let fwd = vae.forward(&x, &Array2::zeros((4, 3))).unwrap();
        assert_eq!(fwd.z, vae.latent_mean(&x).unwrap());
        assert!(fwd.kl.iter().all(|v| *v >= 0.0));
        assert!(vae.forward(&x, &Array2::zeros((4, 2))).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vae = Vae::new(6, &[5, 4], 2, &mut rng);
        assert!(vae.param_count() <= 1000);
        let x = binary_batch(3, 6, &mut rng);
        let eps = vae.sample_eps(3, &mut rng);
        let gz = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let weight = 0.7;
        let loss = |v: &Vae| {
            let f = v.forward(&x, &eps).unwrap();
            weight * f.loss() + (&f.z * &gz).sum()
        };
        let fwd = vae.forward(&x, &eps).unwrap();
        let grad = vae.backward(&x, &fwd, weight, Some(&gz)).unwrap();
        let err = gradcheck::max_rel_error(&mut vae, &gradcheck::flatten(&grad), 1e-5, 1e-6, loss);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn training_reduces_loss() {
        use crate::nn::{sgd_step, SgdConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut vae = Vae::new(16, &[12], 4, &mut rng);
        let protos = binary_batch(2, 16, &mut rng);
        let x = Array2::from_shape_fn((32, 16), |(i, j)| protos[[i % 2, j]]);
        let cfg = SgdConfig::new(0.05, 0.0, 32).unwrap();
        let zero = Array2::zeros((32, 4));
        let first = vae.forward(&x, &zero).unwrap().loss();
        for e in 0..200 {
            let eps = vae.sample_eps(32, &mut rng);
            let fwd = vae.forward(&x, &eps).unwrap();
            let g = vae.backward(&x, &fwd, 1.0, None).unwrap();
            sgd_step(&mut vae, &g, &cfg, e).unwrap();
        }
        let last = vae.forward(&x, &zero).unwrap().loss();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
