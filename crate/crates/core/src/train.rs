//! Loss assembly, dynamic per-distance weights, the two-phase training
//! schedule and incremental fine-tuning after dataset updates.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bits::Bits;
use crate::data::{Dataset, LabeledExample, Record};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{prefix_sums, CardNetModel};
use crate::nn::{self, sgd_step, Matrix, Params, SgdConfig};
use crate::oracle::{self, LabeledCurve};

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the VAE loss.
    pub lambda: f64,
    /// Weight of the per-distance loss terms.
    pub lambda_delta: f64,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub validate_every: usize,
    pub vae_pretrain_epochs: usize,
    pub vae_learning_rate: f64,
    pub batch_size: usize,
    /// Multiplies every epoch count; 1.0 is the full schedule.
    pub epoch_scale: f64,
    /// Update per-distance weights at validation points during phase 2.
    pub dynamic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lambda_delta: 0.1,
            phase1: PhaseConfig {
                learning_rate: 0.001,
                decay: 0.0,
                epochs: 500,
            },
            phase2: PhaseConfig {
                learning_rate: 0.00025,
                decay: 5e-4,
                epochs: 300,
            },
            validate_every: 10,
            vae_pretrain_epochs: 100,
            vae_learning_rate: 0.001,
            batch_size: 256,
            epoch_scale: 0.1,
            dynamic: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn scaled(&self, epochs: usize) -> usize {
        if epochs == 0 {
            return 0;
        }
        ((epochs as f64 * self.epoch_scale).round() as usize).max(1)
    }

    pub fn phase1_epochs(&self) -> usize {
        self.scaled(self.phase1.epochs)
    }

    pub fn phase2_epochs(&self) -> usize {
        self.scaled(self.phase2.epochs)
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.scaled(self.vae_pretrain_epochs)
    }

    /// Phase-1 plus phase-2 epochs after scaling.
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs() + self.phase2_epochs()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda_delta >= 0.0
            && self.phase1.learning_rate > 0.0
            && self.phase2.learning_rate > 0.0
            && self.phase1.decay >= 0.0
            && self.phase2.decay >= 0.0
            && self.vae_learning_rate > 0.0
            && self.validate_every > 0
            && self.batch_size > 0
            && self.epoch_scale > 0.0
            && self.epoch_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training settings: {self:?}")))
        }
    }

    fn sgd(&self, phase: &PhaseConfig) -> Result<SgdConfig> {
        SgdConfig::new(phase.learning_rate, phase.decay, self.batch_size)
    }
}

/// One labeled threshold of a query.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub theta: f64,
    pub tau: u32,
    pub cardinality: u64,
}

/// Everything training needs about one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryLabels {
    pub query_id: usize,
    pub record: Record,
    pub code: Bits,
    pub curve: LabeledCurve,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub queries: Vec<QueryLabels>,
}

impl LabeledSet {
    /// Labels every query at every threshold with the exact oracle.
    pub fn label(dataset: &Dataset, cfg: &FeatureConfig, queries: &[(usize, Record)], thresholds: &[f64]) -> Result<Self> {
        if let Some(t) = thresholds.iter().find(|t| !(**t >= 0.0 && **t <= cfg.theta_max)) {
            return Err(Error::arg(format!("threshold {t} outside [0, {}]", cfg.theta_max)));
        }
        let uppers = cfg.bin_uppers();
        let taus = thresholds
            .iter()
            .map(|&t| cfg.map_threshold(t))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(queries.len());
        for (id, record) in queries {
            let sorted = oracle::sorted_distances(dataset, record)?;
            let curve = oracle::curve_from_sorted(*id, &sorted, &uppers);
            let examples = thresholds
                .iter()
                .zip(&taus)
                .map(|(&theta, &tau)| Example {
                    theta,
                    tau,
                    cardinality: sorted.partition_point(|d| *d <= theta) as u64,
                })
                .collect();
            out.push(QueryLabels {
                query_id: *id,
                record: record.clone(),
                code: cfg.encode(record)?,
                curve,
                examples,
            });
        }
        Ok(LabeledSet { queries: out })
    }

    /// Assembles a set from stored curves and examples. `records` supplies
    /// the query record for every id that appears.
    pub fn from_parts(
        cfg: &FeatureConfig,
        records: &[(usize, Record)],
        curves: &[LabeledCurve],
        examples: &[LabeledExample],
    ) -> Result<Self> {
        let bins = cfg.tau_max as usize + 1;
        let mut out = Vec::with_capacity(records.len());
        for (id, record) in records {
            let curve = curves
                .iter()
                .find(|c| c.query_id == *id)
                .ok_or_else(|| Error::arg(format!("no curve for query {id}")))?;
            if curve.counts.len() != bins {
                return Err(Error::arg(format!(
                    "curve for query {id} has {} bins, expected {bins}",
                    curve.counts.len()
                )));
            }
            let ex = examples
                .iter()
                .filter(|e| e.query_id == *id)
                .map(|e| {
                    Ok(Example {
                        theta: e.theta,
                        tau: cfg.map_threshold(e.theta)?,
                        cardinality: e.cardinality,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(QueryLabels {
                query_id: *id,
                record: record.clone(),
                code: cfg.encode(record)?,
                curve: curve.clone(),
                examples: ex,
            });
        }
        Ok(LabeledSet { queries: out })
    }

    /// Same queries and thresholds, labels recomputed on `dataset`.
    pub fn relabel(&self, dataset: &Dataset, cfg: &FeatureConfig) -> Result<Self> {
        let uppers = cfg.bin_uppers();
        let mut out = self.clone();
        for q in &mut out.queries {
            let sorted = oracle::sorted_distances(dataset, &q.record)?;
            q.curve = oracle::curve_from_sorted(q.query_id, &sorted, &uppers);
            for e in &mut q.examples {
                e.cardinality = sorted.partition_point(|d| *d <= e.theta) as u64;
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn num_examples(&self) -> usize {
        self.queries.iter().map(|q| q.examples.len()).sum()
    }

    pub fn labeled_examples(&self) -> Vec<LabeledExample> {
        self.queries
            .iter()
            .flat_map(|q| {
                q.examples.iter().map(move |e| LabeledExample {
                    query_id: q.query_id,
                    theta: e.theta,
                    cardinality: e.cardinality,
                })
            })
            .collect()
    }

    pub fn curves(&self) -> Vec<LabeledCurve> {
        self.queries.iter().map(|q| q.curve.clone()).collect()
    }
}

/// Empirical distribution of mapped thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct TauDistribution {
    pub p: Vec<f64>,
}

pub fn estimate_tau_distribution(taus: &[u32], tau_max: u32) -> Result<TauDistribution> {
    if taus.is_empty() {
        return Err(Error::arg("cannot estimate a threshold distribution from no examples"));
    }
    let mut counts = vec![0usize; tau_max as usize + 1];
    for &t in taus {
        if t > tau_max {
            return Err(Error::arg(format!("tau {t} exceeds tau_max {tau_max}")));
        }
        counts[t as usize] += 1;
    }
    let n = taus.len() as f64;
    Ok(TauDistribution {
        p: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

impl TauDistribution {
    pub fn from_set(set: &LabeledSet, tau_max: u32) -> Result<Self> {
        let taus: Vec<u32> = set.queries.iter().flat_map(|q| q.examples.iter().map(|e| e.tau)).collect();
        estimate_tau_distribution(&taus, tau_max)
    }
}

/// `MSLE(pred, truth) + lambda_delta * sum_i omega_i * MSLE(pred_bins[i], truth_bins[i])`.
/// Distances with no entries contribute nothing.
pub fn loss_g(
    pred: &[f64],
    truth: &[f64],
    pred_bins: &[Vec<f64>],
    truth_bins: &[Vec<f64>],
    omega: &[f64],
    lambda_delta: f64,
) -> Result<f64> {
    if pred_bins.len() != truth_bins.len() || pred_bins.len() > omega.len() {
        return Err(Error::shape("per-distance inputs and weights disagree in length"));
    }
    let mut loss = nn::msle(pred, truth)?;
    for (i, (p, t)) in pred_bins.iter().zip(truth_bins).enumerate() {
        if p.is_empty() && t.is_empty() {
            continue;
        }
        if omega[i] != 0.0 {
            loss += lambda_delta * omega[i] * nn::msle(p, t)?;
        }
    }
    Ok(loss)
}

/// Importance weights `p(tau) / freq_batch(tau)` for a batch of mapped thresholds.
pub fn tau_weights(taus: &[u32], dist: &TauDistribution) -> Vec<f64> {
    let mut freq = vec![0usize; dist.p.len()];
    for &t in taus {
        freq[t as usize] += 1;
    }
    let n = taus.len() as f64;
    let w: Vec<f64> = taus
        .iter()
        .map(|&t| dist.p[t as usize] / (freq[t as usize] as f64 / n))
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        vec![1.0; taus.len()]
    } else {
        w
    }
}

/// `sum_e wt_e * L_g(e) / sum_e wt_e + lambda * vae_loss`.
pub fn loss_total(losses: &[f64], taus: &[u32], dist: &TauDistribution, vae_loss: f64, lambda: f64) -> Result<f64> {
    if losses.len() != taus.len() || losses.is_empty() {
        return Err(Error::shape("one tau per example loss required"));
    }
    if let Some(t) = taus.iter().find(|t| **t as usize >= dist.p.len()) {
        return Err(Error::arg(format!("tau {t} outside the distribution")));
    }
    let w = tau_weights(taus, dist);
    let total: f64 = w.iter().sum();
    let expected: f64 = losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / total;
    Ok(expected + lambda * vae_loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicWeights {
    pub omega: Vec<f64>,
    pub last_losses: Option<Vec<f64>>,
}

impl DynamicWeights {
    pub fn new(bins: usize) -> Self {
        DynamicWeights {
            omega: vec![0.0; bins],
            last_losses: None,
        }
    }

    pub fn reset(&mut self) {
        self.omega.iter_mut().for_each(|w| *w = 0.0);
        self.last_losses = None;
    }
}

/// Shares weight among the distances whose loss went up, in proportion to
/// the increase. The first call only records the losses.
pub fn update_dynamic_weights(state: &mut DynamicWeights, losses: &[f64]) -> Result<()> {
    if losses.len() != state.omega.len() {
        return Err(Error::shape(format!(
            "{} losses for {} weights",
            losses.len(),
            state.omega.len()
        )));
    }
    if let Some(prev) = &state.last_losses {
        let delta: Vec<f64> = losses.iter().zip(prev).map(|(a, b)| a - b).collect();
        let total: f64 = delta.iter().filter(|d| **d > 0.0).sum();
        for (w, d) in state.omega.iter_mut().zip(&delta) {
            *w = if *d > 0.0 && total > 0.0 { d / total } else { 0.0 };
        }
    }
    state.last_losses = Some(losses.to_vec());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Init,
    Basic,
    Full,
    Update,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Basic => "phase1",
            Phase::Full => "phase2",
            Phase::Update => "update",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean batch loss over the epoch; `NaN` for rows without training.
    pub train_loss: f64,
    pub valid_msle: f64,
    pub valid_mse: f64,
    pub valid_mape: f64,
}

pub const HISTORY_HEADER: &str = "epoch,phase,train_loss,valid_msle,valid_mse,valid_mape";

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.phase, r.train_loss, r.valid_msle, r.valid_mse, r.valid_mape
        ));
    }
    s
}

/// Validation metrics of a model on a labeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub msle: f64,
    pub mse: f64,
    /// Over examples with non-zero truth.
    pub mape: f64,
    /// MSLE of each decoder output against the per-bin counts.
    pub per_distance: Vec<f64>,
}

const INFER_CHUNK: usize = 256;

/// Decoder outputs for all bins of every query, one row per query.
pub fn decoder_matrix(model: &CardNetModel, set: &LabeledSet) -> Result<Matrix> {
    let bins = model.bins();
    let mut all = Array2::zeros((set.len(), bins));
    for (c, chunk) in set.queries.chunks(INFER_CHUNK).enumerate() {
        let codes: Vec<&Bits> = chunk.iter().map(|q| &q.code).collect();
        let g = model.decoder_outputs(&codes, bins - 1)?;
        all.slice_mut(ndarray::s![c * INFER_CHUNK..c * INFER_CHUNK + chunk.len(), ..])
            .assign(&g);
    }
    Ok(all)
}

pub fn validate(model: &CardNetModel, set: &LabeledSet) -> Result<Validation> {
    if set.num_examples() == 0 {
        return Err(Error::arg("validation set has no examples"));
    }
    let g = decoder_matrix(model, set)?;
    let bins = model.bins();
    let (mut sle, mut se, mut ape, mut n, mut n_pos) = (0.0, 0.0, 0.0, 0usize, 0usize);
    let mut per = vec![0.0; bins];
    for (r, q) in set.queries.iter().enumerate() {
        let prefix = prefix_sums(g.row(r).iter().copied());
        for e in &q.examples {
            let est = prefix[e.tau as usize];
            let c = e.cardinality as f64;
            sle += (est.ln_1p() - c.ln_1p()).powi(2);
            se += (est - c).powi(2);
            if e.cardinality > 0 {
                ape += (est - c).abs() / c;
                n_pos += 1;
            }
            n += 1;
        }
        for i in 0..bins {
            per[i] += (g[[r, i]].ln_1p() - (q.curve.counts[i] as f64).ln_1p()).powi(2);
        }
    }
    let nq = set.len() as f64;
    let v = Validation {
        msle: sle / n as f64,
        mse: se / n as f64,
        mape: if n_pos > 0 { ape / n_pos as f64 } else { 0.0 },
        per_distance: per.into_iter().map(|x| x / nq).collect(),
    };
    if !v.msle.is_finite() || !v.mse.is_finite() {
        return Err(Error::Numeric(format!("validation loss is not finite: {v:?}")));
    }
    Ok(v)
}

/// Loss and decoder-output gradient for one batch of queries.
///
/// Row `r` of `g` holds the decoder outputs of `queries[r]`. Returns the
/// batch `L_g` expectation (without the VAE term) and `dL/dg`.
pub fn batch_objective(
    g: &Matrix,
    queries: &[&QueryLabels],
    dist: &TauDistribution,
    omega: Option<&[f64]>,
    lambda_delta: f64,
) -> Result<(f64, Matrix)> {
    let taus: Vec<u32> = queries.iter().flat_map(|q| q.examples.iter().map(|e| e.tau)).collect();
    if taus.is_empty() {
        return Err(Error::arg("batch has no examples"));
    }
    let w = tau_weights(&taus, dist);
    let wsum: f64 = w.iter().sum();
    let t = g.ncols();
    let mut grad = Array2::zeros(g.raw_dim());
    let mut loss = 0.0;
    let mut k = 0;
    for (r, q) in queries.iter().enumerate() {
        let row = g.row(r);
        let prefix = prefix_sums(row.iter().copied());
        // Per-bin log errors and their derivatives, shared by this query's examples.
        let bin_err: Vec<(f64, f64)> = (0..t)
            .map(|i| {
                let d = row[i].ln_1p() - (q.curve.counts[i] as f64).ln_1p();
                (d * d, 2.0 * d / (1.0 + row[i]))
            })
            .collect();
        for e in &q.examples {
            let tau = e.tau as usize;
            if tau >= t {
                return Err(Error::shape(format!("example tau {tau} beyond computed bins {t}")));
            }
            let scale = w[k] / wsum;
            k += 1;
            let est = prefix[tau];
            let d = est.ln_1p() - (e.cardinality as f64).ln_1p();
            let mut lg = d * d;
            let dtotal = 2.0 * d / (1.0 + est);
            for i in 0..=tau {
                grad[[r, i]] += scale * dtotal;
            }
            if let Some(om) = omega {
                for i in 0..=tau {
                    if om[i] != 0.0 {
                        lg += lambda_delta * om[i] * bin_err[i].0;
                        grad[[r, i]] += scale * lambda_delta * om[i] * bin_err[i].1;
                    }
                }
            }
            loss += scale * lg;
        }
    }
    Ok((loss, grad))
}

/// Largest bin any example of these queries needs.
fn top_bin(queries: &[&QueryLabels]) -> usize {
    queries
        .iter()
        .flat_map(|q| q.examples.iter().map(|e| e.tau as usize))
        .max()
        .unwrap_or(0)
}

/// One SGD step on a batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut CardNetModel,
    batch: &[&QueryLabels],
    dist: &TauDistribution,
    omega: Option<&[f64]>,
    cfg: &TrainConfig,
    sgd: &SgdConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let codes: Vec<&Bits> = batch.iter().map(|q| &q.code).collect();
    let x = model.code_matrix(&codes)?;
    let eps = model.vae.sample_eps(batch.len(), rng);
    let fwd = model.forward_batch(&x, Some(&eps), top_bin(batch))?;
    let (lg, dg) = batch_objective(&fwd.g, batch, dist, omega, cfg.lambda_delta)?;
    let loss = lg + cfg.lambda * fwd.vae_loss().unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss} at epoch {epoch}")));
    }
    let grad = model.backward_batch(&x, &fwd, &dg, cfg.lambda)?;
    sgd_step(model, &grad, sgd, epoch)?;
    Ok(loss)
}

/// Whole queries are grouped until a batch holds at least `batch_size` examples.
fn batches<'a>(order: &[usize], set: &'a LabeledSet, batch_size: usize) -> Vec<Vec<&'a QueryLabels>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &i in order {
        let q = &set.queries[i];
        if q.examples.is_empty() {
            continue;
        }
        n += q.examples.len();
        cur.push(q);
        if n >= batch_size {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut CardNetModel,
    set: &LabeledSet,
    dist: &TauDistribution,
    omega: Option<&[f64]>,
    cfg: &TrainConfig,
    sgd: &SgdConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut count = 0;
    for batch in batches(&order, set, cfg.batch_size) {
        total += train_batch(model, &batch, dist, omega, cfg, sgd, epoch, rng)?;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Unsupervised VAE training on record codes; returns the final epoch's mean loss.
pub fn pretrain_vae(model: &mut CardNetModel, codes: &[Bits], cfg: &TrainConfig) -> Result<f64> {
    let epochs = cfg.pretrain_epochs();
    if epochs == 0 || codes.is_empty() {
        return Ok(f64::NAN);
    }
    let sgd = SgdConfig::new(cfg.vae_learning_rate, 0.0, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6570);
    let mut order: Vec<usize> = (0..codes.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Bits> = chunk.iter().map(|&i| &codes[i]).collect();
            let x = model.code_matrix(&refs)?;
            let eps = model.vae.sample_eps(chunk.len(), &mut rng);
            let fwd = model.vae.forward(&x, &eps)?;
            let loss = fwd.loss();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("VAE loss became {loss} at epoch {epoch}")));
            }
            let grad = model.vae.backward(&x, &fwd, 1.0, None)?;
            sgd_step(&mut model.vae, &grad, &sgd, epoch)?;
            total += loss;
            count += 1;
        }
        last = total / count as f64;
    }
    Ok(last)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the smallest validation MSLE.
    pub model: CardNetModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_valid_msle: f64,
    /// Validation MSLE before any supervised training.
    pub initial_valid_msle: f64,
}

/// Pretrains the VAE on `vae_codes`, then runs the basic and full phases,
/// validating every `validate_every` epochs and after each phase's last epoch.
pub fn train(
    mut model: CardNetModel,
    train_set: &LabeledSet,
    valid_set: &LabeledSet,
    vae_codes: &[Bits],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.num_examples() == 0 {
        return Err(Error::arg("training set has no examples"));
    }
    let tau_max = model.features.tau_max;
    let dist = TauDistribution::from_set(valid_set, tau_max)?;
    pretrain_vae(&mut model, vae_codes, cfg)?;

    let mut history = Vec::new();
    let v0 = validate(&model, valid_set)?;
    history.push(row(0, Phase::Init, f64::NAN, &v0));
    let initial = v0.msle;
    let mut best = (model.clone(), 0usize, v0.msle);
    let mut last_valid = v0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_7261_696e);
    let mut weights = DynamicWeights::new(model.bins());
    let mut epoch = 0;
    for (phase, pc, n) in [
        (Phase::Basic, &cfg.phase1, cfg.phase1_epochs()),
        (Phase::Full, &cfg.phase2, cfg.phase2_epochs()),
    ] {
        let sgd = cfg.sgd(pc)?;
        if phase == Phase::Full {
            weights.reset();
            if cfg.dynamic {
                update_dynamic_weights(&mut weights, &last_valid.per_distance)?;
            }
        }
        for e in 0..n {
            epoch += 1;
            let omega = (phase == Phase::Full).then_some(weights.omega.as_slice());
            let loss = run_epoch(&mut model, train_set, &dist, omega, cfg, &sgd, e, &mut rng)?;
            if (e + 1) % cfg.validate_every == 0 || e + 1 == n {
                let v = validate(&model, valid_set)?;
                history.push(row(epoch, phase, loss, &v));
                if v.msle < best.2 {
                    best = (model.clone(), epoch, v.msle);
                }
                if phase == Phase::Full && cfg.dynamic {
                    update_dynamic_weights(&mut weights, &v.per_distance)?;
                }
                last_valid = v;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        history,
        best_epoch: best.1,
        best_valid_msle: best.2,
        initial_valid_msle: initial,
    })
}

fn row(epoch: usize, phase: Phase, train_loss: f64, v: &Validation) -> HistoryRow {
    HistoryRow {
        epoch,
        phase,
        train_loss,
        valid_msle: v.msle,
        valid_mse: v.mse,
        valid_mape: v.mape,
    }
}

#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub model: CardNetModel,
    pub fine_tuned: bool,
    pub epochs: usize,
    /// Validation MSLE of the incoming model on the relabeled set.
    pub relabeled_valid_msle: f64,
    pub final_valid_msle: f64,
    pub train_set: LabeledSet,
    pub valid_set: LabeledSet,
    pub history: Vec<HistoryRow>,
}

/// Relabels validation queries on the updated dataset. If the model's
/// validation MSLE rose above `baseline_msle`, relabels the training queries
/// too and fine-tunes with the full loss until the validation MSLE stays
/// within 1e-6 relative for three consecutive epochs or `max_epochs` pass.
pub fn incremental_update(
    model: &CardNetModel,
    dataset: &Dataset,
    train_set: &LabeledSet,
    valid_set: &LabeledSet,
    baseline_msle: f64,
    cfg: &TrainConfig,
    max_epochs: usize,
) -> Result<UpdateOutcome> {
    cfg.validate()?;
    let features = &model.features;
    let valid = valid_set.relabel(dataset, features)?;
    let v0 = validate(model, &valid)?;
    let mut history = vec![row(0, Phase::Init, f64::NAN, &v0)];
    if !(v0.msle > baseline_msle) || max_epochs == 0 {
        return Ok(UpdateOutcome {
            model: model.clone(),
            fine_tuned: false,
            epochs: 0,
            relabeled_valid_msle: v0.msle,
            final_valid_msle: v0.msle,
            train_set: train_set.clone(),
            valid_set: valid,
            history,
        });
    }
    let train_new = train_set.relabel(dataset, features)?;
    let dist = TauDistribution::from_set(&valid, features.tau_max)?;
    let sgd = cfg.sgd(&cfg.phase2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7570_6461_7465);
    let mut current = model.clone();
    let mut weights = DynamicWeights::new(current.bins());
    if cfg.dynamic {
        update_dynamic_weights(&mut weights, &v0.per_distance)?;
    }
    let mut best = (current.clone(), v0.msle);
    let mut prev = v0.msle;
    let mut stable = 0;
    let mut epochs = 0;
    while epochs < max_epochs {
        let loss = run_epoch(
            &mut current,
            &train_new,
            &dist,
            Some(&weights.omega),
            cfg,
            &sgd,
            epochs,
            &mut rng,
        )?;
        epochs += 1;
        let v = validate(&current, &valid)?;
        history.push(row(epochs, Phase::Update, loss, &v));
        if v.msle < best.1 {
            best = (current.clone(), v.msle);
        }
        if cfg.dynamic {
            update_dynamic_weights(&mut weights, &v.per_distance)?;
        }
        let rel = (v.msle - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        stable = if rel <= 1e-6 { stable + 1 } else { 0 };
        prev = v.msle;
        if stable >= 3 {
            break;
        }
    }
    Ok(UpdateOutcome {
        model: best.0,
        fine_tuned: true,
        epochs,
        relabeled_valid_msle: v0.msle,
        final_valid_msle: best.1,
        train_set: train_new,
        valid_set: valid,
        history,
    })
}

/// Sum of squared parameter changes between two models of one layout.
pub fn parameter_distance(a: &CardNetModel, b: &CardNetModel) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Mode};
    use crate::nn::gradcheck;
    use rand::Rng;

    #[test]
    fn tau_distribution_cases() {
        let d = estimate_tau_distribution(&[3, 3, 3], 5).unwrap();
        assert_eq!(d.p, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let d = estimate_tau_distribution(&[0, 1], 3).unwrap();
        assert_eq!(d.p, vec![0.5, 0.5, 0.0, 0.0]);
        let d = estimate_tau_distribution(&[0, 1, 1, 2, 4, 4, 4], 4).unwrap();
        assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(estimate_tau_distribution(&[], 3).is_err());
        assert!(estimate_tau_distribution(&[4], 3).is_err());
    }

    #[test]
    fn loss_g_cases() {
        let bins = vec![vec![1.0, 2.0], vec![3.0]];
        let zero = loss_g(&[4.0, 5.0], &[4.0, 5.0], &bins, &bins, &[0.5, 0.5], 0.1).unwrap();
        assert_eq!(zero, 0.0);
        let plain = nn::msle(&[1.0, 9.0], &[2.0, 5.0]).unwrap();
        let other = vec![vec![0.0, 0.0], vec![7.0]];
        assert_eq!(loss_g(&[1.0, 9.0], &[2.0, 5.0], &bins, &other, &[0.0, 0.0], 0.1).unwrap(), plain);
        assert_eq!(loss_g(&[1.0, 9.0], &[2.0, 5.0], &bins, &other, &[0.3, 0.7], 0.0).unwrap(), plain);
        let weighted = loss_g(&[1.0, 9.0], &[2.0, 5.0], &bins, &other, &[0.3, 0.7], 0.1).unwrap();
        let want = plain
            + 0.1 * (0.3 * nn::msle(&bins[0], &other[0]).unwrap() + 0.7 * nn::msle(&bins[1], &other[1]).unwrap());
        assert!((weighted - want).abs() < 1e-15);
        assert!(loss_g(&[-1.0], &[1.0], &[], &[], &[], 0.1).is_err());
    }

    #[test]
    fn loss_total_cases() {
        let uniform = TauDistribution { p: vec![0.5, 0.5] };
        let l = [1.0, 3.0, 2.0, 6.0];
        let t = [0, 1, 0, 1];
        assert!((loss_total(&l, &t, &uniform, 2.0, 0.1).unwrap() - (3.0 + 0.2)).abs() < 1e-12);
        assert_eq!(loss_total(&l, &t, &uniform, 2.0, 0.0).unwrap(), 3.0);
        let skewed = TauDistribution { p: vec![0.2, 0.8] };
        assert!((loss_total(&[2.0, 4.0], &[1, 1], &skewed, 0.0, 0.1).unwrap() - 3.0).abs() < 1e-12);
        // p = (0.2, 0.8) against an even batch over-weights tau = 1.
        let w = loss_total(&l, &t, &skewed, 0.0, 0.0).unwrap();
        assert!((w - (0.2 * 1.5 + 0.8 * 4.5)).abs() < 1e-12);
    }

    #[test]
    fn dynamic_weight_cases() {
        let mut s = DynamicWeights::new(3);
        update_dynamic_weights(&mut s, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.omega, vec![0.0; 3]);
        update_dynamic_weights(&mut s, &[2.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.omega, vec![0.5, 0.0, 0.5]);
        update_dynamic_weights(&mut s, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.omega, vec![0.0; 3]);
        update_dynamic_weights(&mut s, &[1.0, 1.5, 0.5]).unwrap();
        assert_eq!(s.omega, vec![0.0, 1.0, 0.0]);
        assert!(update_dynamic_weights(&mut s, &[1.0]).is_err());
    }

    fn tiny_setup(mode: Mode) -> (Dataset, FeatureConfig, CardNetModel, LabeledSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recs: Vec<Record> = (0..60)
            .map(|_| Record::Bits(Bits::from_bools((0..8).map(|_| rng.random::<bool>()))))
            .collect();
        let ds = Dataset::new(crate::data::RecordKind::Bits, recs).unwrap();
        let features = FeatureConfig::hamming(8, 4.0, 4).unwrap();
        let model = CardNetModel::new(features.clone(), Architecture::tiny(), mode, 1).unwrap();
        let queries: Vec<(usize, Record)> = (0..12).map(|i| (i, ds.records[i].clone())).collect();
        let set = LabeledSet::label(&ds, &features, &queries, &features.label_thresholds(0)).unwrap();
        (ds, features, model, set)
    }

    #[test]
    fn batch_objective_gradient_matches_finite_differences() {
        let (_, _, model, set) = tiny_setup(Mode::CardNet);
        let qs: Vec<&QueryLabels> = set.queries.iter().take(4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Array2::from_shape_simple_fn((4, model.bins()), || rng.random_range(0.0..6.0));
        let dist = TauDistribution {
            p: vec![0.1, 0.3, 0.2, 0.25, 0.15],
        };
        let omega = [0.2, 0.0, 0.5, 0.3, 0.0];
        let (_, grad) = batch_objective(&g, &qs, &dist, Some(&omega), 0.1).unwrap();
        for r in 0..4 {
            for i in 0..model.bins() {
                let mut up = g.clone();
                up[[r, i]] += 1e-5;
                let mut down = g.clone();
                down[[r, i]] -= 1e-5;
                let lu = batch_objective(&up, &qs, &dist, Some(&omega), 0.1).unwrap().0;
                let ld = batch_objective(&down, &qs, &dist, Some(&omega), 0.1).unwrap().0;
                let num = (lu - ld) / 2e-5;
                let rel = (num - grad[[r, i]]).abs() / num.abs().max(grad[[r, i]].abs()).max(1e-8);
                assert!(rel < 1e-4, "{r},{i}: {num} vs {}", grad[[r, i]]);
            }
        }
    }

    #[test]
    fn per_example_loss_matches_loss_g() {
        let (_, _, _, set) = tiny_setup(Mode::CardNet);
        let q = &set.queries[0];
        let g = Array2::from_shape_fn((1, 5), |(_, i)| 1.0 + i as f64);
        let omega = [0.1, 0.2, 0.3, 0.4, 0.0];
        let dist = TauDistribution { p: vec![0.2; 5] };
        let single = QueryLabels {
            examples: vec![q.examples[2].clone()],
            ..q.clone()
        };
        let (l, _) = batch_objective(&g, &[&single], &dist, Some(&omega), 0.1).unwrap();
        let tau = single.examples[0].tau as usize;
        let row: Vec<f64> = g.row(0).to_vec();
        let est: f64 = row[..=tau].iter().sum();
        let pb: Vec<Vec<f64>> = (0..=tau).map(|i| vec![row[i]]).collect();
        let tb: Vec<Vec<f64>> = (0..=tau).map(|i| vec![q.curve.counts[i] as f64]).collect();
        let want = loss_g(&[est], &[single.examples[0].cardinality as f64], &pb, &tb, &omega, 0.1).unwrap();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_through_model() {
        for mode in [Mode::CardNet, Mode::CardNetA] {
            let (_, features, _, set) = tiny_setup(mode);
            let arch = Architecture {
                latent_dim: 2,
                vae_hidden: vec![4],
                embed_dim: 2,
                phi_hidden: vec![6, 5],
                z_dim: 4,
                regions: vec![2, 2],
            };
            let mut model = CardNetModel::new(features, arch, mode, 3).unwrap();
            gradcheck::jitter(&mut model, 2, 0.1);
            model.dec_b.fill(0.5);
            assert!(model.param_count() <= 1000);
            let qs: Vec<&QueryLabels> = set.queries.iter().take(3).collect();
            let codes: Vec<&Bits> = qs.iter().map(|q| &q.code).collect();
            let x = model.code_matrix(&codes).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let eps = model.vae.sample_eps(3, &mut rng);
            let dist = TauDistribution::from_set(&set, 4).unwrap();
            let omega = [0.25, 0.25, 0.0, 0.5, 0.0];
            let lambda = 0.1;
            let loss = |m: &CardNetModel| {
                let f = m.forward_batch(&x, Some(&eps), 4).unwrap();
                batch_objective(&f.g, &qs, &dist, Some(&omega), 0.1).unwrap().0 + lambda * f.vae_loss().unwrap()
            };
            let f = model.forward_batch(&x, Some(&eps), 4).unwrap();
            let (_, dg) = batch_objective(&f.g, &qs, &dist, Some(&omega), 0.1).unwrap();
            let grad = model.backward_batch(&x, &f, &dg, lambda).unwrap();
            let err = gradcheck::max_rel_error(&mut model, &gradcheck::flatten(&grad), 1e-5, 1e-6, loss);
            assert!(err < 1e-4, "{mode}: {err}");
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            phase1: PhaseConfig {
                learning_rate: 0.01,
                decay: 0.0,
                epochs: 6,
            },
            phase2: PhaseConfig {
                learning_rate: 0.005,
                decay: 5e-4,
                epochs: 4,
            },
            validate_every: 2,
            vae_pretrain_epochs: 3,
            batch_size: 32,
            epoch_scale: 1.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let (ds, _, model, set) = tiny_setup(Mode::CardNet);
        let (train_set, valid_set) = (
            LabeledSet {
                queries: set.queries[..8].to_vec(),
            },
            LabeledSet {
                queries: set.queries[8..].to_vec(),
            },
        );
        let codes: Vec<Bits> = ds.records.iter().map(|r| r.as_bits().unwrap().clone()).collect();
        let cfg = quick_cfg();
        let a = train(model.clone(), &train_set, &valid_set, &codes, &cfg).unwrap();
        let b = train(model, &train_set, &valid_set, &codes, &cfg).unwrap();
        assert_eq!(history_to_csv(&a.history), history_to_csv(&b.history));
        assert!(a.history.iter().all(|h| a.best_valid_msle <= h.valid_msle));
        assert_eq!(validate(&a.model, &valid_set).unwrap().msle, a.best_valid_msle);
        assert_eq!(a.history.first().unwrap().phase, Phase::Init);
        assert_eq!(a.history.len(), 1 + 3 + 2);
        let csv = history_to_csv(&a.history);
        assert!(csv.starts_with(HISTORY_HEADER));
    }

    #[test]
    fn empty_training_set_is_error() {
        let (_, _, model, set) = tiny_setup(Mode::CardNet);
        assert!(train(model, &LabeledSet::default(), &set, &[], &quick_cfg()).is_err());
    }

    #[test]
    fn update_without_change_is_noop() {
        let (ds, _, model, set) = tiny_setup(Mode::CardNetA);
        let base = validate(&model, &set).unwrap().msle;
        let out = incremental_update(&model, &ds, &set, &set, base, &quick_cfg(), 5).unwrap();
        assert!(!out.fine_tuned);
        assert_eq!(out.epochs, 0);
        assert_eq!(parameter_distance(&out.model, &model), 0.0);
    }

    #[test]
    fn relabel_after_deletion() {
        let (ds, features, _, set) = tiny_setup(Mode::CardNet);
        let q = &set.queries[0];
        let theta = 2.0;
        let kept: Vec<Record> = ds
            .records
            .iter()
            .filter(|r| oracle::distance(r, &q.record).unwrap() > theta)
            .cloned()
            .collect();
        let smaller = Dataset::new(ds.kind, kept).unwrap();
        let relabeled = set.relabel(&smaller, &features).unwrap();
        let e = relabeled.queries[0].examples.iter().find(|e| e.theta == theta).unwrap();
        assert_eq!(e.cardinality, 0);
    }
}
