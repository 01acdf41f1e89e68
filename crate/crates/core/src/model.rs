//! The CardNet regressor.
//!
//! A binary code `x` is extended with its VAE latent into `x'`. In
//! [`Mode::CardNet`] a shared network `Phi` maps `[x'; e^i]` to an embedding
//! `z^i` for every bin `i`, costing one pass per bin. In [`Mode::CardNetA`]
//! a single pass of `Phi'` emits all embeddings at once: hidden layer `j`
//! projects to a block of `(tau_max + 1) * w_j` values that becomes columns
//! `r_{j-1}..r_j` of every `z^i`. Decoder `i` is `relu(w_i . z^i + b_i)` and
//! the estimate at bin `tau` is the running sum of decoders `0..=tau`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bits::Bits;
use crate::data::Record;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::nn::{
    accumulate, fnn_param_count, slice, slice_mut, Activation, Dense, DenseGrad, Fnn, FnnCache, FnnGrad, Matrix,
    Params, Vae, VaeForward, VaeGrad, Vector,
};
use crate::CardinalityEstimator;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    CardNet,
    CardNetA,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::CardNet => "cardnet",
            Mode::CardNetA => "cardnet-a",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cardnet" => Ok(Mode::CardNet),
            "cardnet-a" | "cardnet_a" => Ok(Mode::CardNetA),
            _ => Err(Error::config(format!("unknown model mode '{s}'"))),
        }
    }
}

/// Layer widths of every component.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Hidden widths of `Phi`, and of `Phi'` in accelerated mode.
    pub phi_hidden: Vec<usize>,
    pub z_dim: usize,
    /// Region widths of `Phi'`, one per hidden layer, summing to `z_dim`.
    pub regions: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            latent_dim: 40,
            vae_hidden: vec![256, 128, 128],
            embed_dim: 5,
            phi_hidden: vec![512, 512, 256, 256],
            z_dim: 60,
            regions: vec![15, 15, 15, 15],
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad integer list for {key}: '{s}'")))
        })
        .collect()
}

impl Architecture {
    /// A small network for tests and quick experiments.
    pub fn tiny() -> Self {
        Architecture {
            latent_dim: 4,
            vae_hidden: vec![16],
            embed_dim: 3,
            phi_hidden: vec![24, 16],
            z_dim: 8,
            regions: vec![4, 4],
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let positive = self.latent_dim > 0
            && self.embed_dim > 0
            && self.z_dim > 0
            && self.vae_hidden.iter().chain(&self.phi_hidden).all(|&w| w > 0);
        if !positive {
            return Err(Error::config("all layer widths must be positive"));
        }
        if mode == Mode::CardNetA {
            if self.regions.len() != self.phi_hidden.len() {
                return Err(Error::config(format!(
                    "{} regions for {} hidden layers",
                    self.regions.len(),
                    self.phi_hidden.len()
                )));
            }
            if self.regions.contains(&0) || self.regions.iter().sum::<usize>() != self.z_dim {
                return Err(Error::config(format!(
                    "region widths {:?} must be positive and sum to z_dim {}",
                    self.regions, self.z_dim
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("arch.latent_dim".into(), self.latent_dim.to_string()),
            ("arch.vae_hidden".into(), list(&self.vae_hidden)),
            ("arch.embed_dim".into(), self.embed_dim.to_string()),
            ("arch.phi_hidden".into(), list(&self.phi_hidden)),
            ("arch.z_dim".into(), self.z_dim.to_string()),
            ("arch.regions".into(), list(&self.regions)),
        ]
    }

    pub fn from_kv(kv: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(&format!("arch.{k}"))
                .ok_or_else(|| Error::config(format!("missing arch.{k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("bad value for arch.{k}")))
        };
        Ok(Architecture {
            latent_dim: num("latent_dim")?,
            vae_hidden: parse_list("vae_hidden", get("vae_hidden")?)?,
            embed_dim: num("embed_dim")?,
            phi_hidden: parse_list("phi_hidden", get("phi_hidden")?)?,
            z_dim: num("z_dim")?,
            regions: parse_list("regions", get("regions")?)?,
        })
    }
}

/// `Phi'`: relu hidden layers, each with an identity projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelNet {
    pub hidden: Vec<Dense>,
    pub heads: Vec<Dense>,
    pub regions: Vec<usize>,
    pub bins: usize,
}

struct AccelCache {
    /// `h[0]` is the input, `h[j+1]` the output of hidden layer `j`.
    h: Vec<Matrix>,
    pre: Vec<Matrix>,
    heads: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelGrad {
    pub hidden: Vec<DenseGrad>,
    pub heads: Vec<DenseGrad>,
}

impl AccelNet {
    fn new(input: usize, hidden: &[usize], regions: &[usize], bins: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        let mut width = input;
        for (&h, &w) in hidden.iter().zip(regions) {
            layers.push(Dense::new(width, h, Activation::Relu, rng));
            heads.push(Dense::new(h, bins * w, Activation::Identity, rng));
            width = h;
        }
        AccelNet {
            hidden: layers,
            heads,
            regions: regions.to_vec(),
            bins,
        }
    }

    /// `rowwise` selects [`Dense::forward_rowwise`], which keeps every row's
    /// result independent of batch size.
    fn forward(&self, x: &Matrix, rowwise: bool) -> Result<AccelCache> {
        let step = |d: &Dense, x: &Matrix| if rowwise { d.forward_rowwise(x) } else { d.forward(x) };
        let mut cache = AccelCache {
            h: vec![x.clone()],
            pre: Vec::new(),
            heads: Vec::new(),
        };
        for (layer, head) in self.hidden.iter().zip(&self.heads) {
            let (pre, out) = step(layer, cache.h.last().unwrap())?;
            cache.heads.push(step(head, &out)?.1);
            cache.pre.push(pre);
            cache.h.push(out);
        }
        Ok(cache)
    }

    fn backward(&self, cache: &AccelCache, dheads: &[Matrix]) -> (AccelGrad, Matrix) {
        let n = self.hidden.len();
        let mut hidden = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        let mut carry: Option<Matrix> = None;
        for j in (0..n).rev() {
            let out = &cache.h[j + 1];
            let (hg, mut dh) = self.heads[j].backward(out, &cache.heads[j], &cache.heads[j], &dheads[j]);
            heads.push(hg);
            if let Some(c) = carry {
                dh += &c;
            }
            let (lg, dx) = self.hidden[j].backward(&cache.h[j], &cache.pre[j], out, &dh);
            hidden.push(lg);
            carry = Some(dx);
        }
        hidden.reverse();
        heads.reverse();
        (AccelGrad { hidden, heads }, carry.unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    /// Distance embeddings `E` (`embed_dim x bins`, column `i` is `e^i`) and `Phi`.
    Shared { embeddings: Matrix, phi: Fnn },
    Accel(AccelNet),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbedderGrad {
    Shared { embeddings: Matrix, phi: FnnGrad },
    Accel(AccelGrad),
}

pub struct CardNetModel {
    pub features: FeatureConfig,
    pub arch: Architecture,
    pub vae: Vae,
    pub embedder: Embedder,
    /// Decoder weights, one row per bin.
    pub dec_w: Matrix,
    pub dec_b: Vector,
    passes: AtomicU64,
}

impl Clone for CardNetModel {
    fn clone(&self) -> Self {
        CardNetModel {
            features: self.features.clone(),
            arch: self.arch.clone(),
            vae: self.vae.clone(),
            embedder: self.embedder.clone(),
            dec_w: self.dec_w.clone(),
            dec_b: self.dec_b.clone(),
            passes: AtomicU64::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl fmt::Debug for CardNetModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CardNetModel")
            .field("mode", &self.mode())
            .field("distance", &self.features.distance)
            .field("tau_max", &self.features.tau_max)
            .field("arch", &self.arch)
            .field("params", &self.param_count())
            .finish()
    }
}

/// Gradient mirror of [`CardNetModel`]; tensors are listed in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub vae: VaeGrad,
    pub embedder: EmbedderGrad,
    pub dec_w: Matrix,
    pub dec_b: Vector,
}

enum EmbedCache {
    Shared(FnnCache),
    Accel(AccelCache),
}

/// Intermediate values of a batched forward pass over bins `0..=top`.
pub struct BatchForward {
    /// `batch x (top + 1)` decoder outputs.
    pub g: Matrix,
    top: usize,
    vae: Option<VaeForward>,
    xp_cols: usize,
    embed: EmbedCache,
    z: Matrix,
    dec_pre: Matrix,
}

impl BatchForward {
    pub fn vae_loss(&self) -> Option<f64> {
        self.vae.as_ref().map(VaeForward::loss)
    }

    pub fn top(&self) -> usize {
        self.top
    }
}

impl CardNetModel {
    pub fn new(features: FeatureConfig, arch: Architecture, mode: Mode, seed: u64) -> Result<Self> {
        arch.validate(mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = features.code_dim();
        let bins = features.tau_max as usize + 1;
        let vae = Vae::new(d, &arch.vae_hidden, arch.latent_dim, &mut rng);
        let xp = d + arch.latent_dim;
        let embedder = match mode {
            Mode::CardNet => {
                let embeddings = Array2::from_shape_simple_fn((arch.embed_dim, bins), || rng.sample(StandardNormal));
                let mut dims = vec![xp + arch.embed_dim];
                dims.extend(&arch.phi_hidden);
                dims.push(arch.z_dim);
                let phi = Fnn::new(&dims, Activation::Relu, Activation::Identity, &mut rng);
                Embedder::Shared { embeddings, phi }
            }
            Mode::CardNetA => Embedder::Accel(AccelNet::new(xp, &arch.phi_hidden, &arch.regions, bins, &mut rng)),
        };
        let limit = (6.0 / (arch.z_dim + 1) as f64).sqrt();
        let dec_w = Array2::from_shape_simple_fn((bins, arch.z_dim), || rng.random_range(-limit..limit));
        Ok(CardNetModel {
            features,
            arch,
            vae,
            embedder,
            dec_w,
            dec_b: Array1::zeros(bins),
            passes: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> Mode {
        match self.embedder {
            Embedder::Shared { .. } => Mode::CardNet,
            Embedder::Accel(_) => Mode::CardNetA,
        }
    }

    pub fn bins(&self) -> usize {
        self.features.tau_max as usize + 1
    }

    pub fn code_dim(&self) -> usize {
        self.vae.input_dim()
    }

    /// Number of input vectors pushed through `Phi` or `Phi'` so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Parameter count composed from the component formulas.
    pub fn expected_param_count(&self) -> usize {
        let a = &self.arch;
        let d = self.code_dim();
        let bins = self.bins();
        let mut enc = vec![d];
        enc.extend(&a.vae_hidden);
        enc.push(2 * a.latent_dim);
        let mut dec = vec![a.latent_dim];
        dec.extend(a.vae_hidden.iter().rev());
        dec.push(d);
        let gamma = fnn_param_count(&enc) + fnn_param_count(&dec);
        let decoders = bins * (a.z_dim + 1);
        let xp = d + a.latent_dim;
        let net = match self.mode() {
            Mode::CardNet => {
                let mut dims = vec![xp + a.embed_dim];
                dims.extend(&a.phi_hidden);
                dims.push(a.z_dim);
                fnn_param_count(&dims) + a.embed_dim * bins
            }
            Mode::CardNetA => {
                let mut total = 0;
                let mut width = xp;
                for (&h, &w) in a.phi_hidden.iter().zip(&a.regions) {
                    total += fnn_param_count(&[width, h]) + fnn_param_count(&[h, bins * w]);
                    width = h;
                }
                total
            }
        };
        gamma + net + decoders
    }

    fn check_code(&self, code: &Bits) -> Result<()> {
        if code.len() != self.code_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.code_dim(),
                found: code.len(),
            });
        }
        Ok(())
    }

    /// Binary codes as a `rows x d` matrix.
    pub fn code_matrix(&self, codes: &[&Bits]) -> Result<Matrix> {
        let mut m = Array2::zeros((codes.len(), self.code_dim()));
        for (row, code) in m.rows_mut().into_iter().zip(codes) {
            self.check_code(code)?;
            code.write_f64(row.into_slice().unwrap());
        }
        Ok(m)
    }

    /// `x' = [x; latent]`, with latent `mu + sigma * eps` if noise is given
    /// and `mu` otherwise.
    pub fn encode_record(&self, code: &Bits, eps: Option<&[f64]>) -> Result<Vec<f64>> {
        let x = self.code_matrix(&[code])?;
        let latent = match eps {
            Some(e) => {
                let e = Array2::from_shape_vec((1, e.len()), e.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
                self.vae.forward(&x, &e)?.z
            }
            None => self.vae.latent_mean(&x)?,
        };
        let mut out = x.into_raw_vec_and_offset().0;
        out.extend(latent.iter());
        Ok(out)
    }

    fn concat(x: &Matrix, latent: &Matrix) -> Matrix {
        let mut xp = Array2::zeros((x.nrows(), x.ncols() + latent.ncols()));
        xp.slice_mut(s![.., ..x.ncols()]).assign(x);
        xp.slice_mut(s![.., x.ncols()..]).assign(latent);
        xp
    }

    fn xp_matrix(&self, rows: &[&[f64]]) -> Result<Matrix> {
        let width = self.code_dim() + self.arch.latent_dim;
        let mut m = Array2::zeros((rows.len(), width));
        for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
            if src.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    found: src.len(),
                });
            }
            dst.assign(&ndarray::ArrayView1::from(*src));
        }
        Ok(m)
    }

    /// Embeddings for bins `0..=top` of every row of `xp`, as
    /// `(rows * (top + 1)) x z_dim` with row `b * (top + 1) + i` holding `z_b^i`.
    fn embed(&self, xp: &Matrix, top: usize, keep: bool) -> Result<(Matrix, Option<EmbedCache>)> {
        let b = xp.nrows();
        let t = top + 1;
        match &self.embedder {
            Embedder::Shared { embeddings, phi } => {
                let w = xp.ncols();
                let mut input = Array2::zeros((b * t, w + self.arch.embed_dim));
                for r in 0..b {
                    for i in 0..t {
                        let mut row = input.row_mut(r * t + i);
                        row.slice_mut(s![..w]).assign(&xp.row(r));
                        row.slice_mut(s![w..]).assign(&embeddings.column(i));
                    }
                }
                self.passes.fetch_add((b * t) as u64, Ordering::Relaxed);
                if keep {
                    let (z, cache) = phi.forward(&input)?;
                    Ok((z, Some(EmbedCache::Shared(cache))))
                } else {
                    Ok((phi.infer(&input)?, None))
                }
            }
            Embedder::Accel(net) => {
                self.passes.fetch_add(b as u64, Ordering::Relaxed);
                let cache = net.forward(xp, !keep)?;
                let mut z = Array2::zeros((b * t, self.arch.z_dim));
                let mut off = 0;
                for (head, &w) in cache.heads.iter().zip(&net.regions) {
                    for r in 0..b {
                        for i in 0..t {
                            z.slice_mut(s![r * t + i, off..off + w])
                                .assign(&head.slice(s![r, i * w..(i + 1) * w]));
                        }
                    }
                    off += w;
                }
                Ok((z, keep.then_some(EmbedCache::Accel(cache))))
            }
        }
    }

    /// `pre[b, i] = w_i . z_b^i + b_i`.
    fn decode_pre(&self, z: &Matrix, rows: usize, top: usize) -> Matrix {
        let t = top + 1;
        Array2::from_shape_fn((rows, t), |(r, i)| z.row(r * t + i).dot(&self.dec_w.row(i)) + self.dec_b[i])
    }

    fn check_top(&self, top: usize) -> Result<()> {
        if top >= self.bins() {
            return Err(Error::arg(format!("bin {top} exceeds tau_max {}", self.bins() - 1)));
        }
        Ok(())
    }

    /// Embeddings `z^0..z^tau` of `Phi`, one pass per bin.
    pub fn final_embeddings_cardnet(&self, xp: &[f64], tau: usize) -> Result<Matrix> {
        if self.mode() != Mode::CardNet {
            return Err(Error::arg("per-bin embeddings require CardNet mode"));
        }
        self.check_top(tau)?;
        Ok(self.embed(&self.xp_matrix(&[xp])?, tau, false)?.0)
    }

    /// The full embedding matrix `Z` of `Phi'` from a single pass.
    pub fn final_embeddings_accel(&self, xp: &[f64]) -> Result<Matrix> {
        if self.mode() != Mode::CardNetA {
            return Err(Error::arg("the joint embedding matrix requires CardNet-A mode"));
        }
        Ok(self.embed(&self.xp_matrix(&[xp])?, self.bins() - 1, false)?.0)
    }

    pub fn decode(&self, z: &[f64], i: usize) -> Result<f64> {
        self.check_top(i)?;
        if z.len() != self.arch.z_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.z_dim,
                found: z.len(),
            });
        }
        let pre: f64 = z.iter().zip(self.dec_w.row(i)).map(|(a, b)| a * b).sum::<f64>() + self.dec_b[i];
        Ok(pre.max(0.0))
    }

    /// Inference-mode decoder outputs for bins `0..=top` of each code.
    pub fn decoder_outputs(&self, codes: &[&Bits], top: usize) -> Result<Matrix> {
        self.check_top(top)?;
        let x = self.code_matrix(codes)?;
        let xp = Self::concat(&x, &self.vae.latent_mean(&x)?);
        let (z, _) = self.embed(&xp, top, false)?;
        Ok(self.decode_pre(&z, codes.len(), top).mapv(|v| v.max(0.0)))
    }

    /// Prefix sums of the decoder outputs for every bin of one code.
    pub fn curve_for_code(&self, code: &Bits) -> Result<Vec<f64>> {
        let g = self.decoder_outputs(&[code], self.bins() - 1)?;
        Ok(prefix_sums(g.row(0).iter().copied()))
    }

    pub fn estimate_code(&self, code: &Bits, tau: u32) -> Result<f64> {
        let g = self.decoder_outputs(&[code], tau as usize)?;
        Ok(prefix_sums(g.row(0).iter().copied())[tau as usize])
    }

    /// Estimated cardinality at every bin boundary, `tau_max + 1` values.
    pub fn estimate_curve(&self, record: &Record) -> Result<Vec<f64>> {
        self.curve_for_code(&self.features.encode(record)?)
    }

    /// Batched training-mode forward pass. With `eps` the latent is sampled
    /// and the VAE loss becomes available; without it the latent mean is used.
    pub fn forward_batch(&self, codes: &Matrix, eps: Option<&Matrix>, top: usize) -> Result<BatchForward> {
        self.check_top(top)?;
        let (latent, vae) = match eps {
            Some(e) => {
                let f = self.vae.forward(codes, e)?;
                (f.z.clone(), Some(f))
            }
            None => (self.vae.latent_mean(codes)?, None),
        };
        let xp = Self::concat(codes, &latent);
        let (z, cache) = self.embed(&xp, top, true)?;
        let dec_pre = self.decode_pre(&z, codes.nrows(), top);
        Ok(BatchForward {
            g: dec_pre.mapv(|v| v.max(0.0)),
            top,
            vae,
            xp_cols: xp.ncols(),
            embed: cache.unwrap(),
            z,
            dec_pre,
        })
    }

    /// Gradient of `<dg, g> + vae_weight * vae_loss`. The VAE only receives
    /// gradient if the forward pass sampled its latent.
    pub fn backward_batch(&self, codes: &Matrix, fwd: &BatchForward, dg: &Matrix, vae_weight: f64) -> Result<ModelGrad> {
        let rows = codes.nrows();
        let t = fwd.top + 1;
        if dg.dim() != (rows, t) {
            return Err(Error::shape(format!("decoder gradient {:?}, expected {:?}", dg.dim(), (rows, t))));
        }
        let mut grad = self.zero_grad();
        let mut dz = Array2::zeros(fwd.z.raw_dim());
        for r in 0..rows {
            for i in 0..t {
                if fwd.dec_pre[[r, i]] <= 0.0 {
                    continue;
                }
                let d = dg[[r, i]];
                if d == 0.0 {
                    continue;
                }
                let zrow = fwd.z.row(r * t + i);
                grad.dec_w.row_mut(i).scaled_add(d, &zrow);
                grad.dec_b[i] += d;
                dz.row_mut(r * t + i).scaled_add(d, &self.dec_w.row(i));
            }
        }

        let dxp = match (&self.embedder, &fwd.embed) {
            (Embedder::Shared { phi, .. }, EmbedCache::Shared(cache)) => {
                let (pg, dinput) = phi.backward(cache, &dz)?;
                let w = fwd.xp_cols;
                let mut de = Array2::zeros((self.arch.embed_dim, self.bins()));
                let mut dxp = Array2::zeros((rows, w));
                for r in 0..rows {
                    for i in 0..t {
                        let row = dinput.row(r * t + i);
                        let mut dx = dxp.row_mut(r);
                        dx += &row.slice(s![..w]);
                        let mut col = de.column_mut(i);
                        col += &row.slice(s![w..]);
                    }
                }
                grad.embedder = EmbedderGrad::Shared { embeddings: de, phi: pg };
                dxp
            }
            (Embedder::Accel(net), EmbedCache::Accel(cache)) => {
                let mut dheads = Vec::with_capacity(net.regions.len());
                let mut off = 0;
                for &w in &net.regions {
                    let mut dh = Array2::zeros((rows, net.bins * w));
                    for r in 0..rows {
                        for i in 0..t {
                            dh.slice_mut(s![r, i * w..(i + 1) * w])
                                .assign(&dz.slice(s![r * t + i, off..off + w]));
                        }
                    }
                    dheads.push(dh);
                    off += w;
                }
                let (ag, dxp) = net.backward(cache, &dheads);
                grad.embedder = EmbedderGrad::Accel(ag);
                dxp
            }
            _ => return Err(Error::shape("forward cache does not match model mode")),
        };

        if let Some(vf) = &fwd.vae {
            let dlatent = dxp.slice(s![.., self.code_dim()..]).to_owned();
            grad.vae = self.vae.backward(codes, vf, vae_weight, Some(&dlatent))?;
        }
        Ok(grad)
    }

    pub fn zero_grad(&self) -> ModelGrad {
        let embedder = match &self.embedder {
            Embedder::Shared { embeddings, phi } => EmbedderGrad::Shared {
                embeddings: Array2::zeros(embeddings.raw_dim()),
                phi: phi.zero_grad(),
            },
            Embedder::Accel(net) => EmbedderGrad::Accel(AccelGrad {
                hidden: net.hidden.iter().map(zero_dense).collect(),
                heads: net.heads.iter().map(zero_dense).collect(),
            }),
        };
        ModelGrad {
            vae: self.vae.zero_grad(),
            embedder,
            dec_w: Array2::zeros(self.dec_w.raw_dim()),
            dec_b: Array1::zeros(self.dec_b.raw_dim()),
        }
    }

    /// Copies all parameters from `other`, which must share the architecture.
    pub fn copy_params_from(&mut self, other: &CardNetModel) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::shape("parameter layouts differ"));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            d.copy_from_slice(s);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn zero_dense(l: &Dense) -> DenseGrad {
    DenseGrad {
        dw: Array2::zeros(l.w.raw_dim()),
        db: Array1::zeros(l.b.raw_dim()),
    }
}

/// Running sums; adding non-negative terms in order can only grow the total.
pub fn prefix_sums(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .into_iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

impl CardinalityEstimator for CardNetModel {
    fn estimate(&self, query: &Record, theta: f64) -> Result<f64> {
        let q = self.features.extract(query, theta)?;
        self.estimate_code(&q.code, q.tau)
    }

    /// Computes the decoders once, up to the largest bin needed.
    fn estimate_many(&self, query: &Record, thetas: &[f64]) -> Result<Vec<f64>> {
        let code = self.features.encode(query)?;
        let taus = thetas
            .iter()
            .map(|&t| self.features.map_threshold(t))
            .collect::<Result<Vec<_>>>()?;
        let Some(&top) = taus.iter().max() else {
            return Ok(Vec::new());
        };
        let g = self.decoder_outputs(&[&code], top as usize)?;
        let prefix = prefix_sums(g.row(0).iter().copied());
        Ok(taus.into_iter().map(|t| prefix[t as usize]).collect())
    }
}

impl Params for CardNetModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.vae.tensors();
        match &self.embedder {
            Embedder::Shared { embeddings, phi } => {
                t.push(slice(embeddings));
                t.extend(phi.tensors());
            }
            Embedder::Accel(net) => {
                t.extend(net.hidden.iter().flat_map(Params::tensors));
                t.extend(net.heads.iter().flat_map(Params::tensors));
            }
        }
        t.push(slice(&self.dec_w));
        t.push(self.dec_b.as_slice().unwrap());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.vae.tensors_mut();
        match &mut self.embedder {
            Embedder::Shared { embeddings, phi } => {
                t.push(slice_mut(embeddings));
                t.extend(phi.tensors_mut());
            }
            Embedder::Accel(net) => {
                t.extend(net.hidden.iter_mut().flat_map(Params::tensors_mut));
                t.extend(net.heads.iter_mut().flat_map(Params::tensors_mut));
            }
        }
        t.push(slice_mut(&mut self.dec_w));
        t.push(self.dec_b.as_slice_mut().unwrap());
        t
    }
}

impl Params for ModelGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.vae.tensors();
        match &self.embedder {
            EmbedderGrad::Shared { embeddings, phi } => {
                t.push(slice(embeddings));
                t.extend(phi.tensors());
            }
            EmbedderGrad::Accel(g) => {
                t.extend(g.hidden.iter().flat_map(Params::tensors));
                t.extend(g.heads.iter().flat_map(Params::tensors));
            }
        }
        t.push(slice(&self.dec_w));
        t.push(self.dec_b.as_slice().unwrap());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.vae.tensors_mut();
        match &mut self.embedder {
            EmbedderGrad::Shared { embeddings, phi } => {
                t.push(slice_mut(embeddings));
                t.extend(phi.tensors_mut());
            }
            EmbedderGrad::Accel(g) => {
                t.extend(g.hidden.iter_mut().flat_map(Params::tensors_mut));
                t.extend(g.heads.iter_mut().flat_map(Params::tensors_mut));
            }
        }
        t.push(slice_mut(&mut self.dec_w));
        t.push(self.dec_b.as_slice_mut().unwrap());
        t
    }
}

impl ModelGrad {
    pub fn add_scaled(&mut self, other: &ModelGrad, scale: f64) -> Result<()> {
        accumulate(self, other, scale)
    }
}
