//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line, even when an earlier
//! one fails.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cardnet::baselines::{MeanEstimator, SamplingEstimator};
use cardnet::data::{sample_workload, split_workload};
use cardnet::eval::{self, EvalCase, OracleEstimator};
use cardnet::features::{collision_probability, EuclideanLsh, FeatureOptions, MinwiseHasher};
use cardnet::model::Architecture;
use cardnet::nn::{self, Activation, Fnn, Matrix, Params, Vae};
use cardnet::planner::{self, Attribute, MultiAttrDataset};
use cardnet::synth::{generate, GenSpec};
use cardnet::train::{
    self, batch_objective, update_dynamic_weights, DynamicWeights, LabeledSet, QueryLabels,
    TauDistribution, TrainConfig,
};
use cardnet::{Bits, CardNetModel, CardinalityEstimator, Dataset, Distance, FeatureConfig, Mode, Record};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- helpers

struct Workload {
    ds: Dataset,
    train: LabeledSet,
    valid: LabeledSet,
    test: LabeledSet,
}

fn queries(ds: &Dataset, ids: &[usize]) -> Vec<(usize, Record)> {
    ids.iter().map(|&i| (i, ds.records[i].clone())).collect()
}

fn workload(ds: Dataset, features: FeatureConfig, ratio: f64, seed: u64) -> cardnet::Result<Workload> {
    let split = split_workload(&sample_workload(&ds, ratio, seed)?, seed)?;
    let th = features.label_thresholds(eval::DEFAULT_GRID_POINTS);
    let train = LabeledSet::label(&ds, &features, &queries(&ds, &split.train), &th)?;
    let valid = LabeledSet::label(&ds, &features, &queries(&ds, &split.valid), &th)?;
    let test = LabeledSet::label(&ds, &features, &queries(&ds, &split.test), &th)?;
    Ok(Workload {
        ds,
        train,
        valid,
        test,
    })
}

fn codes(features: &FeatureConfig, ds: &Dataset) -> Vec<Bits> {
    ds.records.iter().map(|r| features.encode(r).unwrap()).collect()
}

fn cases(set: &LabeledSet) -> Vec<EvalCase> {
    set.queries
        .iter()
        .flat_map(|q| {
            q.examples.iter().map(move |e| EvalCase {
                query_id: q.query_id,
                record: q.record.clone(),
                theta: e.theta,
                cardinality: e.cardinality,
            })
        })
        .collect()
}

fn scaled(scale: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epoch_scale: scale,
        seed,
        ..TrainConfig::default()
    }
}

/// Central differences over every parameter, compared with `analytic`.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
fn fd_check<P: Params>(p: &mut P, analytic: &[Vec<f64>], loss: impl Fn(&P) -> f64) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut worst = 0.0f64;
    let shapes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
    assert_eq!(shapes, analytic.iter().map(Vec::len).collect::<Vec<_>>());
    for (t, n) in shapes.into_iter().enumerate() {
        for i in 0..n {
            let orig = p.tensors()[t][i];
            p.tensors_mut()[t][i] = orig + STEP;
            let up = loss(p);
            p.tensors_mut()[t][i] = orig - STEP;
            let down = loss(p);
            p.tensors_mut()[t][i] = orig;
            let num = (up - down) / (2.0 * STEP);
            let a = analytic[t][i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(FLOOR));
        }
    }
    worst
}

fn flat<P: Params>(g: &P) -> Vec<Vec<f64>> {
    g.tensors().iter().map(|t| t.to_vec()).collect()
}

/// Moves every parameter off zero so no ReLU sits exactly on its kink.
fn perturb<P: Params>(p: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn levenshtein_dp(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn jaccard_dist(a: &[u32], b: &[u32]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - sa.intersection(&sb).count() as f64 / union as f64
}

// ---------------------------------------------------------------- criteria

fn distance_setups() -> Vec<(Distance, Dataset, f64, u32)> {
    vec![
        (Distance::Hamming, generate(&GenSpec::bits(500, 32, 4, 11)).unwrap(), 8.0, 8),
        (Distance::Edit, generate(&GenSpec::text(500, "acgt", 12, 4, 12)).unwrap(), 3.0, 3),
        (Distance::Jaccard, generate(&GenSpec::sets(500, 200, 10, 4, 13)).unwrap(), 0.6, 10),
        (Distance::Euclidean, generate(&GenSpec::real(500, 8, 4, 14)).unwrap(), 1.0, 10),
    ]
}

fn c1_monotonicity() -> Check {
    let start = Instant::now();
    let mut report = Vec::new();
    for (distance, ds, theta_max, tau_max) in distance_setups() {
        let features = FeatureConfig::for_dataset(&ds, distance, theta_max, tau_max, &FeatureOptions::default())
            .map_err(e2s)?;
        let grid = features.label_thresholds(201);
        let w = workload(ds, features.clone(), 0.2, 1).map_err(e2s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ids = (0..w.ds.len()).collect::<Vec<_>>();
        ids.shuffle(&mut rng);
        let qs: Vec<Record> = ids[..100].iter().map(|&i| w.ds.records[i].clone()).collect();
        let vae_codes = codes(&features, &w.ds);
        for mode in [Mode::CardNet, Mode::CardNetA] {
            let fresh = CardNetModel::new(features.clone(), Architecture::tiny(), mode, 5).map_err(e2s)?;
            let trained = train::train(fresh.clone(), &w.train, &w.valid, &vae_codes, &scaled(0.02, 5))
                .map_err(e2s)?
                .model;
            for (label, m) in [("random", &fresh), ("trained", &trained)] {
                let r = eval::dgrmon(m, &qs, &grid).map_err(e2s)?;
                ensure(r.dgrmon == 100.0, || format!("{distance}/{mode}/{label}: DgrMon {}", r.dgrmon))?;
                report.push(r.comparable_pairs);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "DgrMon 100.0 on 16 model/distance combinations, {} threshold pairs, {secs:.1}s",
        report.iter().sum::<usize>()
    ))
}

fn c2_gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: Vec<(String, f64)> = Vec::new();

    // Phi on its own.
    let mut phi = Fnn::new(&[7, 9, 8, 5], Activation::Relu, Activation::Identity, &mut rng);
    perturb(&mut phi, 1);
    let x = random_matrix(4, 7, &mut rng);
    let r = random_matrix(4, 5, &mut rng);
    let (_, cache) = phi.forward(&x).map_err(e2s)?;
    let (g, _) = phi.backward(&cache, &r).map_err(e2s)?;
    let e = fd_check(&mut phi, &flat(&g), |p| (&p.forward(&x).unwrap().0 * &r).sum());
    worst.push((format!("phi({} params)", phi.param_count()), e));

    // VAE reconstruction + KL with a fixed noise draw.
    let mut vae = Vae::new(8, &[6], 3, &mut rng);
    perturb(&mut vae, 2);
    let xb = Matrix::from_shape_fn((5, 8), |_| f64::from(u8::from(rng.random::<bool>())));
    let eps = random_matrix(5, 3, &mut rng);
    let f = vae.forward(&xb, &eps).map_err(e2s)?;
    let g = vae.backward(&xb, &f, 1.0, None).map_err(e2s)?;
    let e = fd_check(&mut vae, &flat(&g), |v| v.forward(&xb, &eps).unwrap().loss());
    worst.push((format!("vae({} params)", vae.param_count()), e));

    // MSLE with respect to predictions.
    let pred: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..50.0)).collect();
    let target: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..50.0)).collect();
    let analytic = nn::msle_grad(&pred, &target).map_err(e2s)?;
    let mut e_msle = 0.0f64;
    for i in 0..pred.len() {
        let mut p = pred.clone();
        p[i] += 1e-5;
        let up = nn::msle(&p, &target).unwrap();
        p[i] -= 2e-5;
        let down = nn::msle(&p, &target).unwrap();
        let num = (up - down) / 2e-5;
        e_msle = e_msle.max((analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6));
    }
    worst.push(("msle".into(), e_msle));

    // Whole model: Phi or Phi', decoders, E, VAE, and the full training loss.
    let ds = generate(&GenSpec::bits(60, 8, 2, 3)).map_err(e2s)?;
    let features = FeatureConfig::hamming(8, 4.0, 4).map_err(e2s)?;
    let set = LabeledSet::label(&ds, &features, &queries(&ds, &[0, 7, 19, 33]), &features.label_thresholds(0))
        .map_err(e2s)?;
    let dist = TauDistribution::from_set(&set, 4).map_err(e2s)?;
    let qs: Vec<&QueryLabels> = set.queries.iter().collect();
    let arch = Architecture {
        latent_dim: 2,
        vae_hidden: vec![5],
        embed_dim: 2,
        phi_hidden: vec![7, 6],
        z_dim: 4,
        regions: vec![2, 2],
    };
    for mode in [Mode::CardNet, Mode::CardNetA] {
        let mut model = CardNetModel::new(features.clone(), arch.clone(), mode, 4).map_err(e2s)?;
        perturb(&mut model, 5);
        model.dec_b.fill(0.5);
        ensure(model.param_count() <= 1000, || format!("{mode} has {} params", model.param_count()))?;
        let refs: Vec<&Bits> = qs.iter().map(|q| &q.code).collect();
        let xm = model.code_matrix(&refs).map_err(e2s)?;
        let eps = random_matrix(qs.len(), 2, &mut rng);
        let r = random_matrix(qs.len(), 5, &mut rng);

        let f = model.forward_batch(&xm, Some(&eps), 4).map_err(e2s)?;
        let g = model.backward_batch(&xm, &f, &r, 0.0).map_err(e2s)?;
        let e = fd_check(&mut model, &flat(&g), |m| (&m.forward_batch(&xm, Some(&eps), 4).unwrap().g * &r).sum());
        worst.push((format!("{mode} decoders({} params)", model.param_count()), e));

        let omega = [0.2, 0.0, 0.3, 0.5, 0.0];
        let lambda = 0.1;
        let loss = |m: &CardNetModel| {
            let f = m.forward_batch(&xm, Some(&eps), 4).unwrap();
            batch_objective(&f.g, &qs, &dist, Some(&omega), 0.1).unwrap().0 + lambda * f.vae_loss().unwrap()
        };
        let (_, dg) = batch_objective(&f.g, &qs, &dist, Some(&omega), 0.1).map_err(e2s)?;
        let g = model.backward_batch(&xm, &f, &dg, lambda).map_err(e2s)?;
        let e = fd_check(&mut model, &flat(&g), loss);
        worst.push((format!("{mode} full loss"), e));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(max < 1e-4, || format!("max relative error {max:.2e}: {detail}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max relative error {max:.1e} ({detail}), {secs:.2}s"))
}

fn c3_edit_bound() -> Check {
    let alphabet = ['a', 'c', 'g', 't'];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random_string = |rng: &mut ChaCha8Rng| -> Vec<char> {
        let len = rng.random_range(0..=20);
        (0..len).map(|_| alphabet[rng.random_range(0..4)]).collect()
    };
    let pairs: Vec<(Vec<char>, Vec<char>)> = (0..1000).map(|_| (random_string(&mut rng), random_string(&mut rng))).collect();
    let mut details = Vec::new();
    let mut violations = Vec::new();
    for tau_max in [1u32, 2, 4] {
        let f = FeatureConfig::edit(alphabet.to_vec(), 20, tau_max as f64, tau_max).map_err(e2s)?;
        let mut worst_ratio = 0.0f64;
        for (x, y) in &pairs {
            let cx = f.encode(&Record::text(&x.iter().collect::<String>())).map_err(e2s)?;
            let cy = f.encode(&Record::text(&y.iter().collect::<String>())).map_err(e2s)?;
            let h = cx.hamming(&cy).map_err(e2s)?;
            let ed = levenshtein_dp(x, y);
            let bound = (4 * tau_max as usize + 2) * ed;
            if h > bound {
                violations.push(format!(
                    "tau_max={tau_max} x={:?} y={:?} H={h} bound={bound}",
                    x.iter().collect::<String>(),
                    y.iter().collect::<String>()
                ));
            }
            if ed > 0 {
                worst_ratio = worst_ratio.max(h as f64 / ed as f64);
            }
        }
        details.push(format!("tau_max={tau_max}: max H/edit {worst_ratio:.2}"));
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!("3000 pair checks hold ({})", details.join("; ")))
}

fn c4_jaccard_lsh() -> Check {
    let k = 256;
    let hasher = MinwiseHasher::new(k, 1, 7).map_err(e2s)?;
    let d = hasher.code_dim() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut within = 0;
    let mut within_half = 0;
    for _ in 0..200 {
        let size = rng.random_range(10..60);
        let x: Vec<u32> = rand::seq::index::sample(&mut rng, 1000, size).into_iter().map(|v| v as u32).collect();
        let keep = rng.random::<f64>();
        let mut y: Vec<u32> = x.iter().copied().filter(|_| rng.random::<f64>() < keep).collect();
        while y.len() < size {
            let v = rng.random_range(0..1000);
            if !y.contains(&v) {
                y.push(v);
            }
        }
        let rx = Record::set(x.clone()).map_err(e2s)?;
        let ry = Record::set(y).map_err(e2s)?;
        let (sx, sy) = (rx.as_set().map_err(e2s)?, ry.as_set().map_err(e2s)?);
        let f = jaccard_dist(sx, sy);
        let h = hasher.encode(sx).map_err(e2s)?.hamming(&hasher.encode(sy).map_err(e2s)?).map_err(e2s)? as f64;
        let se = (d * f * (1.0 - f)).sqrt();
        if (h - f * d).abs() <= 3.0 * se {
            within += 1;
        }
        // Reference model: each of the k minhashes differs with chance f and
        // then its 1-bit value differs with chance 1/2, costing 2 bits.
        let p = f / 2.0;
        if (h - 2.0 * k as f64 * p).abs() <= 3.0 * 2.0 * (k as f64 * p * (1.0 - p)).sqrt() {
            within_half += 1;
        }
    }
    let frac = within as f64 / 200.0;
    let detail = format!(
        "{:.1}% of pairs within 3 SE of f*d ({:.1}% within 3 SE of the b-bit expectation f*d/2)",
        100.0 * frac,
        100.0 * within_half as f64 / 200.0
    );
    ensure(frac >= 0.99, || detail.clone())?;
    Ok(detail)
}

fn c5_euclidean_collision() -> Check {
    let n = 100_000;
    let lsh = EuclideanLsh::new(n, 1.0, 31, 2).map_err(e2s)?;
    let mut out = Vec::new();
    for theta in [0.5f64, 1.0, 2.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(theta.to_bits());
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let base = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let other = [base[0] + theta * angle.cos(), base[1] + theta * angle.sin()];
        let hx = lsh.raw_hashes(&base).map_err(e2s)?;
        let hy = lsh.raw_hashes(&other).map_err(e2s)?;
        let freq = hx.iter().zip(&hy).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let eps = collision_probability(1.0, theta).map_err(e2s)?;
        ensure((freq - eps).abs() <= 0.02, || format!("theta={theta}: empirical {freq:.4} vs {eps:.4}"))?;
        out.push(format!("theta={theta}: {freq:.4} vs {eps:.4}"));
    }
    Ok(out.join(", "))
}

fn c6_training() -> Check {
    let start = Instant::now();
    let ds = generate(&GenSpec::bits(5000, 64, 8, 1)).map_err(e2s)?;
    let features = FeatureConfig::hamming(64, 20.0, 20).map_err(e2s)?;
    let w = workload(ds, features.clone(), 0.1, 1).map_err(e2s)?;
    let model = CardNetModel::new(features.clone(), Architecture::default(), Mode::CardNet, 1).map_err(e2s)?;
    let cfg = scaled(0.1, 1);
    ensure(cfg.phase1_epochs() == 50 && cfg.phase2_epochs() == 30, || "schedule is not 50+30".into())?;
    let out = train::train(model, &w.train, &w.valid, &codes(&features, &w.ds), &cfg).map_err(e2s)?;
    let test = cases(&w.test);
    let cardnet = eval::evaluate(&out.model, &test).map_err(e2s)?;
    let sampling = SamplingEstimator::new(&w.ds, 0.01, 1).map_err(e2s)?;
    let base = eval::evaluate(&sampling, &test).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "valid MSLE {:.3} -> {:.3} (ratio {:.3}); test MAPE cardnet {:.3} vs sampling {:.3}; test MSLE {:.3} vs {:.3}; {secs:.0}s",
        out.initial_valid_msle,
        out.best_valid_msle,
        out.best_valid_msle / out.initial_valid_msle,
        cardnet.mape,
        base.mape,
        cardnet.msle,
        base.msle
    );
    ensure(out.best_valid_msle <= 0.5 * out.initial_valid_msle, || format!("(a) fails: {detail}"))?;
    ensure(cardnet.mape < base.mape, || format!("(b) fails: {detail}"))?;
    ensure(secs < 900.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn c7_acceleration() -> Check {
    let ds = generate(&GenSpec::bits(1000, 64, 8, 2)).map_err(e2s)?;
    let features = FeatureConfig::hamming(64, 63.0, 63).map_err(e2s)?;
    let plain = CardNetModel::new(features.clone(), Architecture::default(), Mode::CardNet, 3).map_err(e2s)?;
    let accel = CardNetModel::new(features.clone(), Architecture::default(), Mode::CardNetA, 3).map_err(e2s)?;
    let q = &ds.records[0];
    for tau in [0u32, 7, 31, 63] {
        plain.reset_forward_passes();
        accel.reset_forward_passes();
        plain.estimate(q, tau as f64).map_err(e2s)?;
        accel.estimate(q, tau as f64).map_err(e2s)?;
        ensure(plain.forward_passes() == u64::from(tau) + 1, || {
            format!("cardnet made {} passes at tau {tau}", plain.forward_passes())
        })?;
        ensure(accel.forward_passes() == 1, || {
            format!("cardnet-a made {} passes at tau {tau}", accel.forward_passes())
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probes: Vec<(usize, f64)> = (0..200)
        .map(|_| (rng.random_range(0..ds.len()), rng.random_range(0..=63) as f64))
        .collect();
    let time = |m: &CardNetModel| {
        let t = Instant::now();
        let mut sink = 0.0;
        for &(i, theta) in &probes {
            sink += m.estimate(&ds.records[i], theta).unwrap();
        }
        (t.elapsed().as_secs_f64() / probes.len() as f64, sink)
    };
    time(&plain);
    time(&accel);
    let (tp, _) = time(&plain);
    let (ta, _) = time(&accel);
    let speedup = tp / ta;
    let qs: Vec<Record> = ds.records[..100].to_vec();
    let mono = eval::dgrmon(&accel, &qs, &eval::theta_grid(&features)).map_err(e2s)?;
    let detail = format!(
        "passes tau+1 vs 1; per estimate {:.3}ms vs {:.3}ms (speedup {speedup:.1}x); cardnet-a DgrMon {}",
        tp * 1e3,
        ta * 1e3,
        mono.dgrmon
    );
    ensure(speedup >= 3.0, || detail.clone())?;
    ensure(mono.dgrmon == 100.0, || detail.clone())?;
    Ok(detail)
}

fn c8_dynamic_weights() -> Check {
    fn run(prev: &[f64], cur: &[f64]) -> Vec<f64> {
        let mut s = DynamicWeights::new(prev.len());
        update_dynamic_weights(&mut s, prev).unwrap();
        update_dynamic_weights(&mut s, cur).unwrap();
        s.omega
    }
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let cases: [(&[f64], &[f64], &[f64], &str); 5] = [
        (&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0], &[0.5, 0.0, 0.5], "two equal increases"),
        (&[3.0, 3.0, 3.0], &[1.0, 2.0, 2.5], &[0.0, 0.0, 0.0], "empty increase set"),
        (&[1.0, 1.0, 1.0, 1.0], &[0.5, 1.0, 1.7, 0.2], &[0.0, 0.0, 1.0, 0.0], "one-hot"),
        (&[1.0, 1.0, 1.0, 3.0], &[2.0, 4.0, 1.0, 1.0], &[0.25, 0.75, 0.0, 0.0], "proportional split"),
        (&[2.0, 2.0], &[2.0, 2.0], &[0.0, 0.0], "no change"),
    ];
    for (prev, cur, want, name) in cases {
        let got = run(prev, cur);
        ensure(close(&got, want), || format!("{name}: got {got:?}, want {want:?}"))?;
    }
    let mut s = DynamicWeights::new(3);
    ensure(update_dynamic_weights(&mut s, &[1.0, 2.0]).is_err(), || "length mismatch accepted".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = DynamicWeights::new(6);
    for step in 0..2000 {
        let losses: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..5.0)).collect();
        update_dynamic_weights(&mut s, &losses).map_err(e2s)?;
        let sum: f64 = s.omega.iter().sum();
        ensure(s.omega.iter().all(|w| *w >= 0.0), || format!("negative weight at step {step}"))?;
        ensure(sum == 0.0 || (sum - 1.0).abs() < 1e-12, || format!("sum {sum} at step {step}"))?;
    }
    Ok("5 formula cases, length check, 2000 random updates with sum in {0, 1}".into())
}

fn c9_incremental() -> Check {
    let start = Instant::now();
    let all = generate(&GenSpec::bits(2200, 32, 6, 5)).map_err(e2s)?;
    let base = Dataset::new(all.kind, all.records[..2000].to_vec()).map_err(e2s)?;
    let grown = Dataset::new(all.kind, all.records.clone()).map_err(e2s)?;
    let features = FeatureConfig::hamming(32, 8.0, 8).map_err(e2s)?;
    let w = workload(base.clone(), features.clone(), 0.15, 6).map_err(e2s)?;
    let cfg = scaled(0.1, 6);
    let fresh = || CardNetModel::new(features.clone(), Architecture::default(), Mode::CardNet, 6).unwrap();
    let first = train::train(fresh(), &w.train, &w.valid, &codes(&features, &base), &cfg).map_err(e2s)?;

    let budget = cfg.total_epochs() / 5;
    let same = train::incremental_update(&first.model, &base, &w.train, &w.valid, first.best_valid_msle, &cfg, budget)
        .map_err(e2s)?;
    ensure(!same.fine_tuned && same.epochs == 0, || "unchanged data triggered fine-tuning".into())?;
    ensure(train::parameter_distance(&same.model, &first.model) == 0.0, || "unchanged data moved parameters".into())?;

    let inc = train::incremental_update(&first.model, &grown, &w.train, &w.valid, first.best_valid_msle, &cfg, budget)
        .map_err(e2s)?;
    let train_new = w.train.relabel(&grown, &features).map_err(e2s)?;
    let valid_new = w.valid.relabel(&grown, &features).map_err(e2s)?;
    let retrain = train::train(fresh(), &train_new, &valid_new, &codes(&features, &grown), &cfg).map_err(e2s)?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "after +10%: stale model {:.4}, incremental {:.4} in {} epochs (fine-tuned {}), retrain {:.4} in {} epochs; {secs:.0}s",
        inc.relabeled_valid_msle,
        inc.final_valid_msle,
        inc.epochs,
        inc.fine_tuned,
        retrain.best_valid_msle,
        cfg.total_epochs()
    );
    ensure(inc.final_valid_msle <= 1.1 * retrain.best_valid_msle, || detail.clone())?;
    ensure(inc.epochs as f64 <= 0.2 * cfg.total_epochs() as f64, || detail.clone())?;
    Ok(detail)
}

fn c10_planner() -> Check {
    let start = Instant::now();
    let features = FeatureConfig::hamming(32, 8.0, 8).map_err(e2s)?;
    let mut attrs = Vec::new();
    let mut models = Vec::new();
    for (i, clusters) in [3usize, 6, 12].into_iter().enumerate() {
        let ds = generate(&GenSpec::bits(2000, 32, clusters, 40 + i as u64)).map_err(e2s)?;
        let w = workload(ds.clone(), features.clone(), 0.1, 41 + i as u64).map_err(e2s)?;
        let model = CardNetModel::new(features.clone(), Architecture::default(), Mode::CardNet, 42 + i as u64)
            .map_err(e2s)?;
        let out = train::train(model, &w.train, &w.valid, &codes(&features, &ds), &scaled(1.0, 43 + i as u64))
            .map_err(e2s)?;
        models.push(out.model);
        attrs.push(Attribute {
            name: format!("a{i}"),
            dataset: ds,
            features: features.clone(),
        });
    }
    let ds = MultiAttrDataset::new(attrs).map_err(e2s)?;
    let queries = planner::synthetic_workload(&ds, 200, 44).map_err(e2s)?;
    let oracles: Vec<OracleEstimator> = ds.attributes().iter().map(|a| OracleEstimator { dataset: &a.dataset }).collect();
    let means: Vec<MeanEstimator> = ds
        .attributes()
        .iter()
        .map(|a| MeanEstimator::build(&a.dataset, a.features.clone(), MeanEstimator::DEFAULT_QUERIES, 45).unwrap())
        .collect();
    let precision = |ests: Vec<&dyn CardinalityEstimator>| planner::planning_precision(&ds, &ests, &queries).unwrap();
    let po = precision(oracles.iter().map(|e| e as &dyn CardinalityEstimator).collect());
    let pc = precision(models.iter().map(|e| e as &dyn CardinalityEstimator).collect());
    let pm = precision(means.iter().map(|e| e as &dyn CardinalityEstimator).collect());
    let detail = format!(
        "precision oracle {:.1}%, cardnet {:.1}%, mean {:.1}%; work {} / {} / {} (optimal {}); {:.0}s",
        po.precision,
        pc.precision,
        pm.precision,
        po.work,
        pc.work,
        pm.work,
        po.optimal_work,
        start.elapsed().as_secs_f64()
    );
    ensure(po.precision == 100.0, || detail.clone())?;
    ensure(po.precision >= pc.precision && pc.precision >= pm.precision, || detail.clone())?;
    ensure(pc.precision >= pm.precision + 5.0, || detail.clone())?;
    Ok(detail)
}

fn c11_identities() -> Check {
    let ds = generate(&GenSpec::bits(800, 32, 4, 50)).map_err(e2s)?;
    let features = FeatureConfig::hamming(32, 10.0, 10).map_err(e2s)?;
    let w = workload(ds, features.clone(), 0.1, 51).map_err(e2s)?;
    let test = cases(&w.test);
    let oracle = eval::evaluate(&OracleEstimator { dataset: &w.ds }, &test).map_err(e2s)?;
    ensure(oracle.mse == 0.0 && oracle.mape == 0.0 && oracle.msle == 0.0, || format!("oracle scored {oracle:?}"))?;

    let sampling = SamplingEstimator::new(&w.ds, 0.05, 52).map_err(e2s)?;
    let r = eval::evaluate(&sampling, &test).map_err(e2s)?;
    let recomposed: f64 = r.per_threshold.iter().map(|b| b.mse * b.count as f64).sum::<f64>() / r.n as f64;
    let rel = (recomposed - r.mse).abs() / r.mse;
    ensure(rel <= 1e-9, || format!("bucket MSE recomposition off by {rel:e}"))?;

    // |FNN(x, y)| = |x||a_1| + sum |a_i||a_{i+1}| + |a_n||y|, plus one bias per unit.
    fn fnn(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
    let archs = [
        (32usize, 10u32, Architecture::default()),
        (32, 10, Architecture::tiny()),
        (
            64,
            20,
            Architecture {
                latent_dim: 8,
                vae_hidden: vec![32, 16],
                embed_dim: 3,
                phi_hidden: vec![64, 32],
                z_dim: 12,
                regions: vec![6, 6],
            },
        ),
        (
            16,
            5,
            Architecture {
                latent_dim: 1,
                vae_hidden: vec![],
                embed_dim: 1,
                phi_hidden: vec![4],
                z_dim: 2,
                regions: vec![2],
            },
        ),
        (
            128,
            63,
            Architecture {
                latent_dim: 40,
                vae_hidden: vec![256, 128, 128],
                embed_dim: 7,
                phi_hidden: vec![100, 90, 80],
                z_dim: 30,
                regions: vec![10, 10, 10],
            },
        ),
    ];
    let mut counts = Vec::new();
    for (d, tau_max, arch) in archs {
        let f = FeatureConfig::hamming(d, tau_max as f64, tau_max).map_err(e2s)?;
        let model = CardNetModel::new(f, arch.clone(), Mode::CardNet, 53).map_err(e2s)?;
        let bins = tau_max as usize + 1;
        let (l, e, z) = (arch.latent_dim, arch.embed_dim, arch.z_dim);
        let phi = fnn(&[&[d + l + e][..], &arch.phi_hidden, &[z]].concat());
        let enc = fnn(&[&[d][..], &arch.vae_hidden, &[2 * l]].concat());
        let hidden_rev: Vec<usize> = arch.vae_hidden.iter().rev().copied().collect();
        let dec = fnn(&[&[l][..], &hidden_rev, &[d]].concat());
        let total = phi + enc + dec + bins * e + bins * z + bins;
        ensure(model.param_count() == total, || {
            format!("arch {arch:?}: counted {} vs formula {total}", model.param_count())
        })?;
        counts.push(total);
    }
    Ok(format!(
        "oracle metrics 0/0/0; bucket MSE recomposition rel err {rel:.1e}; param counts {counts:?}"
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Check); 11] = [
        ("monotonicity", c1_monotonicity),
        ("gradient checks", c2_gradients),
        ("edit-distance code bound", c3_edit_bound),
        ("jaccard LSH expectation", c4_jaccard_lsh),
        ("euclidean collision probability", c5_euclidean_collision),
        ("training effectiveness", c6_training),
        ("acceleration", c7_acceleration),
        ("dynamic weights", c8_dynamic_weights),
        ("incremental learning", c9_incremental),
        ("planner precision", c10_planner),
        ("metric identities", c11_identities),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
