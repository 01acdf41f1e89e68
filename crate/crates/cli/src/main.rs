use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cardnet::baselines::{MeanEstimator, SamplingEstimator};
use cardnet::container::{load_model, save_model, ModelFile};
use cardnet::data::{sample_workload, save_labels, split_workload};
use cardnet::eval::{self, EvalCase, OracleEstimator};
use cardnet::features::FeatureOptions;
use cardnet::model::Architecture;
use cardnet::oracle::save_curves;
use cardnet::planner::{self, Attribute, MultiAttrDataset};
use cardnet::synth::{self, GenSpec};
use cardnet::train::{self, history_to_csv, LabeledSet, TrainConfig};
use cardnet::{Bits, CardNetModel, CardinalityEstimator, Dataset, Distance, FeatureConfig, Mode, Record, RecordKind};

#[derive(Parser)]
#[command(name = "cardnet", version, about = "Monotone learned cardinality estimation for similarity selections")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tau_max: Option<u32>,
    #[arg(long, global = true)]
    epoch_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset (or a multi-attribute directory).
    GenData(GenArgs),
    /// Dump binary codes of every record and the mapped thresholds.
    Extract(ExtractArgs),
    /// Sample a query workload and write exact labels and curves.
    Label(LabelArgs),
    /// Train a model and write a container plus the training history.
    Train(TrainArgs),
    /// Estimate cardinalities with a saved model.
    Estimate(EstimateArgs),
    /// Evaluate an estimator on the test split recorded in a model.
    Eval(EvalArgs),
    /// Measure the degree of monotonicity of a saved model.
    Monotest(MonoArgs),
    /// Incrementally update a model after the dataset changed.
    Update(UpdateArgs),
    /// Planning precision on conjunctive queries over a multi-attribute directory.
    Plan(PlanArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file, one record per line.
    #[arg(long)]
    data: Option<PathBuf>,
    /// bits, text, set or realvec.
    #[arg(long)]
    kind: Option<String>,
    /// hamming, edit, jaccard or euclidean; defaults from the record kind.
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    theta_max: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    universe: Option<u32>,
    #[arg(long)]
    set_size: Option<usize>,
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    skew: Option<f64>,
    /// Write a directory of this many aligned attributes plus a manifest.
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    theta_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Take the feature configuration from this model instead of deriving it.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Thresholds to map; repeatable.
    #[arg(long)]
    theta: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    workload_ratio: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// cardnet or cardnet-a.
    #[arg(long)]
    mode: Option<String>,
    /// default or tiny.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    workload_ratio: Option<f64>,
    /// Save the freshly initialized model without training.
    #[arg(long)]
    no_train: bool,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query record in dataset line format.
    #[arg(long)]
    query: String,
    /// Repeatable; one estimate per line in the given order.
    #[arg(long)]
    theta: Vec<f64>,
    /// Print the whole curve as `tau,bin_upper,estimate`.
    #[arg(long)]
    curve: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// cardnet, sampling, mean or oracle.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args)]
struct UpdateArgs {
    #[arg(long)]
    model: PathBuf,
    /// The changed dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Multi-attribute directory with a manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: Option<usize>,
    /// cardnet, mean, sampling or oracle.
    #[arg(long)]
    estimator: Option<String>,
    /// One model per attribute, comma separated (cardnet only).
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Read the workload from this file instead of generating one.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Write the workload used.
    #[arg(long)]
    save_workload: Option<PathBuf>,
}

/// Bad or missing arguments; exits with code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Config-file values, overridden by command-line flags.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        let mut s = Settings { file };
        s.set("seed", common.seed);
        s.set("tau_max", common.tau_max);
        s.set("epoch_scale", common.epoch_scale);
        Ok(s)
    }

    fn set<T: ToString>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.file.insert(key.to_string(), v.to_string());
        }
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("invalid value '{v}' for {key}"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.get(flag, key)?.ok_or_else(|| usage(format!("--{} is required", key.replace('_', "-"))))
    }

    fn seed(&self) -> Result<u64> {
        self.or(None, "seed", 0)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epoch_scale: self.or(None, "epoch_scale", d.epoch_scale)?,
            seed: self.seed()?,
            lambda: self.or(None, "lambda", d.lambda)?,
            lambda_delta: self.or(None, "lambda_delta", d.lambda_delta)?,
            validate_every: self.or(None, "validate_every", d.validate_every)?,
            batch_size: self.or(None, "batch_size", d.batch_size)?,
            dynamic: self.or(None, "dynamic", d.dynamic)?,
            phase1: train::PhaseConfig {
                learning_rate: self.or(None, "phase1_learning_rate", d.phase1.learning_rate)?,
                ..d.phase1
            },
            phase2: train::PhaseConfig {
                learning_rate: self.or(None, "phase2_learning_rate", d.phase2.learning_rate)?,
                ..d.phase2
            },
            ..d
        })
    }
}

fn parse_arg<T: FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| usage(format!("invalid {what} '{s}': {e}")))
}

fn load_dataset(settings: &Settings, args: &DataArgs) -> Result<Dataset> {
    let path = settings.path(args.data.clone(), "data")?;
    let kind: RecordKind = parse_arg(&settings.or(args.kind.clone(), "kind", "bits".into())?, "kind")?;
    Ok(Dataset::load(&path, kind)?)
}

fn default_distance(kind: RecordKind) -> Distance {
    match kind {
        RecordKind::Bits => Distance::Hamming,
        RecordKind::Text => Distance::Edit,
        RecordKind::Set => Distance::Jaccard,
        RecordKind::RealVec => Distance::Euclidean,
    }
}

fn derive_features(settings: &Settings, ds: &Dataset, distance: Option<String>, theta_max: Option<f64>) -> Result<FeatureConfig> {
    let distance = match settings.get(distance, "distance")? {
        Some(d) => parse_arg::<Distance>(&d, "distance")?,
        None => default_distance(ds.kind),
    };
    let theta_max = match settings.get(theta_max, "theta_max")? {
        Some(t) => t,
        None => match distance {
            Distance::Hamming => 20f64.min(ds.dim as f64),
            Distance::Edit => 4.0,
            Distance::Jaccard => 0.4,
            Distance::Euclidean => bail!(usage("--theta-max is required for euclidean distance")),
        },
    };
    let default_tau = if distance.is_integral() { (theta_max as u32).max(1) } else { 20 };
    let tau_max = settings.or(None, "tau_max", default_tau)?;
    let opts = FeatureOptions {
        seed: settings.seed()?,
        ..FeatureOptions::default()
    };
    Ok(FeatureConfig::for_dataset(ds, distance, theta_max, tau_max, &opts)?)
}

fn ids_to_string(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn ids_from_meta(meta: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let v = meta.get(key).ok_or_else(|| anyhow!("model lacks '{key}' metadata"))?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.parse().with_context(|| format!("bad id in {key}"))).collect()
}

/// Query records stored in the container, so they survive dataset edits.
fn queries_from_meta(file: &ModelFile, split: &str) -> Result<Vec<(usize, Record)>> {
    let kind = file.model.features.record_kind();
    ids_from_meta(&file.meta, &format!("split.{split}"))?
        .into_iter()
        .map(|id| {
            let line = file
                .meta
                .get(&format!("query.{id}"))
                .ok_or_else(|| anyhow!("model lacks the record of query {id}"))?;
            Ok((id, Record::parse_line(kind, line)?))
        })
        .collect()
}

fn thresholds(features: &FeatureConfig) -> Vec<f64> {
    features.label_thresholds(eval::DEFAULT_GRID_POINTS)
}

fn vae_codes(features: &FeatureConfig, ds: &Dataset) -> Result<Vec<Bits>> {
    Ok(ds.records.iter().map(|r| features.encode(r)).collect::<cardnet::Result<_>>()?)
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen(settings: &Settings, a: GenArgs) -> Result<()> {
    let seed = settings.seed()?;
    let kind: RecordKind = parse_arg(&settings.or(a.kind, "kind", "bits".into())?, "kind")?;
    let n = settings.or(a.n, "n", 1000)?;
    let clusters = settings.or(a.clusters, "clusters", 8)?;
    let dim = settings.or(a.dim, "dim", 64)?;
    let mut spec = match kind {
        RecordKind::Bits => GenSpec::bits(n, dim, clusters, seed),
        RecordKind::RealVec => GenSpec::real(n, dim, clusters, seed),
        RecordKind::Set => GenSpec::sets(
            n,
            settings.or(a.universe, "universe", 1000)?,
            settings.or(a.set_size, "set_size", 20)?,
            clusters,
            seed,
        ),
        RecordKind::Text => GenSpec::text(
            n,
            &settings.or(a.alphabet, "alphabet", "acgt".into())?,
            settings.or(a.l_max, "l_max", 20)?,
            clusters,
            seed,
        ),
    };
    spec.spread = settings.or(a.spread, "spread", spec.spread)?;
    spec.noise = settings.or(a.noise, "noise", spec.noise)?;
    spec.skew = settings.or(a.skew, "skew", spec.skew)?;
    match settings.get(a.attributes, "attributes")? {
        None => {
            let ds = synth::generate(&spec)?;
            ds.save(&a.out)?;
            eprintln!("wrote {} {} records to {} (seed {seed})", ds.len(), kind, a.out.display());
        }
        Some(m) => {
            if m == 0 {
                bail!(usage("--attributes must be positive"));
            }
            let mut attrs = Vec::with_capacity(m);
            for i in 0..m {
                let mut s = spec.clone();
                s.seed = seed.wrapping_add(i as u64);
                let ds = synth::generate(&s)?;
                let features = derive_features(settings, &ds, a.distance.clone(), a.theta_max)?;
                attrs.push(Attribute {
                    name: format!("attr{i}"),
                    dataset: ds,
                    features,
                });
            }
            MultiAttrDataset::new(attrs)?.save_dir(&a.out)?;
            eprintln!("wrote {m} attributes of {n} rows to {} (seed {seed})", a.out.display());
        }
    }
    Ok(())
}

fn cmd_extract(settings: &Settings, a: ExtractArgs) -> Result<()> {
    let (ds, features) = match &a.model {
        Some(m) => {
            let f = load_model(m)?.model.features;
            let path = settings.path(a.data.data.clone(), "data")?;
            (Dataset::load(&path, f.record_kind())?, f)
        }
        None => {
            let ds = load_dataset(settings, &a.data)?;
            let f = derive_features(settings, &ds, a.data.distance.clone(), a.data.theta_max)?;
            (ds, f)
        }
    };
    let mut s = String::new();
    for (i, r) in ds.records.iter().enumerate() {
        writeln!(s, "record\t{i}\t{}", features.encode(r)?)?;
    }
    for t in &a.theta {
        writeln!(s, "threshold\t{t:?}\t{}", features.map_threshold(*t)?)?;
    }
    write_out(a.out.as_deref(), &s)
}

struct Labeled {
    ds: Dataset,
    features: FeatureConfig,
    split: cardnet::data::WorkloadSplit,
    train: LabeledSet,
    valid: LabeledSet,
}

fn label_workload(settings: &Settings, args: &DataArgs, ratio: Option<f64>) -> Result<Labeled> {
    let ds = load_dataset(settings, args)?;
    let features = derive_features(settings, &ds, args.distance.clone(), args.theta_max)?;
    let seed = settings.seed()?;
    let ratio = settings.or(ratio, "workload_ratio", 0.1)?;
    let split = split_workload(&sample_workload(&ds, ratio, seed)?, seed)?;
    let th = thresholds(&features);
    let q = |ids: &[usize]| -> Vec<(usize, Record)> { ids.iter().map(|&i| (i, ds.records[i].clone())).collect() };
    let train = LabeledSet::label(&ds, &features, &q(&split.train), &th)?;
    let valid = LabeledSet::label(&ds, &features, &q(&split.valid), &th)?;
    Ok(Labeled {
        ds,
        features,
        split,
        train,
        valid,
    })
}

fn cmd_label(settings: &Settings, a: LabelArgs) -> Result<()> {
    let l = label_workload(settings, &a.data, a.workload_ratio)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let q = |ids: &[usize]| -> Vec<(usize, Record)> { ids.iter().map(|&i| (i, l.ds.records[i].clone())).collect() };
    let test = LabeledSet::label(&l.ds, &l.features, &q(&l.split.test), &thresholds(&l.features))?;
    for (name, set) in [("train", &l.train), ("valid", &l.valid), ("test", &test)] {
        save_labels(a.out_dir.join(format!("{name}_labels.csv")), &set.labeled_examples())?;
        save_curves(a.out_dir.join(format!("{name}_curves.csv")), &set.curves())?;
    }
    eprintln!(
        "labeled {}/{}/{} queries in {} (seed {})",
        l.train.len(),
        l.valid.len(),
        test.len(),
        a.out_dir.display(),
        settings.seed()?
    );
    Ok(())
}

fn mode_and_arch(settings: &Settings, mode: Option<String>, arch: Option<String>) -> Result<(Mode, Architecture)> {
    let mode: Mode = parse_arg(&settings.or(mode, "mode", "cardnet".into())?, "mode")?;
    let arch = match settings.or(arch, "arch", "default".into())?.as_str() {
        "default" => Architecture::default(),
        "tiny" => Architecture::tiny(),
        other => bail!(usage(format!("unknown architecture '{other}' (default or tiny)"))),
    };
    Ok((mode, arch))
}

fn train_meta(file: &mut ModelFile, cfg: &TrainConfig, ratio: f64) {
    let m = &mut file.meta;
    m.insert("train.seed".into(), cfg.seed.to_string());
    m.insert("train.epoch_scale".into(), format!("{:?}", cfg.epoch_scale));
    m.insert("train.lambda".into(), format!("{:?}", cfg.lambda));
    m.insert("train.lambda_delta".into(), format!("{:?}", cfg.lambda_delta));
    m.insert("train.batch_size".into(), cfg.batch_size.to_string());
    m.insert("train.validate_every".into(), cfg.validate_every.to_string());
    m.insert("train.dynamic".into(), cfg.dynamic.to_string());
    m.insert("train.workload_ratio".into(), format!("{ratio:?}"));
}

fn cmd_train(settings: &Settings, a: TrainArgs) -> Result<()> {
    let cfg = settings.train_config()?;
    let ratio = settings.or(a.workload_ratio, "workload_ratio", 0.1)?;
    let l = label_workload(settings, &a.data, Some(ratio))?;
    let (mode, arch) = mode_and_arch(settings, a.mode, a.arch)?;
    let model = CardNetModel::new(l.features.clone(), arch, mode, cfg.seed)?;
    let (model, history, best_msle, best_epoch) = if a.no_train {
        let v = train::validate(&model, &l.valid)?;
        (model, Vec::new(), v.msle, 0)
    } else {
        let out = train::train(model, &l.train, &l.valid, &vae_codes(&l.features, &l.ds)?, &cfg)?;
        eprintln!(
            "trained {} epochs: valid MSLE {:.4} -> {:.4} (best epoch {})",
            cfg.total_epochs(),
            out.initial_valid_msle,
            out.best_valid_msle,
            out.best_epoch
        );
        (out.model, out.history, out.best_valid_msle, out.best_epoch)
    };
    let mut file = ModelFile::new(model);
    train_meta(&mut file, &cfg, ratio);
    file.meta.insert("train.best_valid_msle".into(), format!("{best_msle:?}"));
    file.meta.insert("train.best_epoch".into(), best_epoch.to_string());
    file.meta.insert("train.trained".into(), (!a.no_train).to_string());
    for (name, ids) in [("train", &l.split.train), ("valid", &l.split.valid), ("test", &l.split.test)] {
        file.meta.insert(format!("split.{name}"), ids_to_string(ids));
        for &id in ids.iter() {
            file.meta.insert(format!("query.{id}"), l.ds.records[id].to_line());
        }
    }
    save_model(&a.out, &file)?;
    let hist = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        p.into()
    });
    fs::write(&hist, history_to_csv(&history)).with_context(|| format!("writing {}", hist.display()))?;
    eprintln!("saved {} and {} (seed {})", a.out.display(), hist.display(), cfg.seed);
    Ok(())
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let q = Record::parse_line(model.features.record_kind(), &a.query)?;
    if a.curve {
        let curve = model.estimate_curve(&q)?;
        println!("tau,bin_upper,estimate");
        for (tau, (c, up)) in curve.iter().zip(model.features.bin_uppers()).enumerate() {
            let up = up.map_or("inf".to_string(), |u| format!("{u:?}"));
            println!("{tau},{up},{c:?}");
        }
        return Ok(());
    }
    if a.theta.is_empty() {
        bail!(usage("give at least one --theta or --curve"));
    }
    for v in model.estimate_many(&q, &a.theta)? {
        println!("{v:?}");
    }
    Ok(())
}

fn test_cases(file: &ModelFile, ds: &Dataset) -> Result<Vec<EvalCase>> {
    let queries = queries_from_meta(file, "test")?;
    let set = LabeledSet::label(ds, &file.model.features, &queries, &thresholds(&file.model.features))?;
    Ok(set
        .queries
        .iter()
        .flat_map(|q| {
            q.examples.iter().map(move |e| EvalCase {
                query_id: q.query_id,
                record: q.record.clone(),
                theta: e.theta,
                cardinality: e.cardinality,
            })
        })
        .collect())
}

fn baseline<'a>(
    name: &str,
    file: &'a ModelFile,
    ds: &'a Dataset,
    seed: u64,
) -> Result<Box<dyn CardinalityEstimator + 'a>> {
    Ok(match name {
        "cardnet" => Box::new(file.model.clone()),
        "sampling" => Box::new(SamplingEstimator::new(ds, SamplingEstimator::DEFAULT_RATIO, seed)?),
        "mean" => Box::new(MeanEstimator::build(
            ds,
            file.model.features.clone(),
            MeanEstimator::DEFAULT_QUERIES,
            seed,
        )?),
        "oracle" => Box::new(OracleEstimator { dataset: ds }),
        other => bail!(usage(format!("unknown estimator '{other}'"))),
    })
}

fn cmd_eval(settings: &Settings, a: EvalArgs) -> Result<()> {
    let file = load_model(&a.model)?;
    let ds = Dataset::load(&a.data, file.model.features.record_kind())?;
    let name = settings.or(a.estimator, "estimator", "cardnet".into())?;
    let est = baseline(&name, &file, &ds, settings.seed()?)?;
    let cases = test_cases(&file, &ds)?;
    let report = eval::evaluate(est.as_ref(), &cases)?;
    eprint!("{}", report.to_table());
    write_out(a.out.as_deref(), &report.to_csv())
}

fn cmd_monotest(settings: &Settings, a: MonoArgs) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let ds = Dataset::load(&a.data, model.features.record_kind())?;
    let n = settings.or(a.queries, "queries", 100)?.min(ds.len());
    let workload = sample_workload(&ds, 1.0, settings.seed()?)?;
    let queries: Vec<Record> = workload.query_ids[..n].iter().map(|&i| ds.records[i].clone()).collect();
    let r = eval::dgrmon(&model, &queries, &eval::theta_grid(&model.features))?;
    println!("dgrmon={:.1}", r.dgrmon);
    println!("monotonic_pairs={}", r.monotonic_pairs);
    println!("comparable_pairs={}", r.comparable_pairs);
    Ok(())
}

fn cmd_update(settings: &Settings, a: UpdateArgs) -> Result<()> {
    let file = load_model(&a.model)?;
    let features = file.model.features.clone();
    let ds = Dataset::load(&a.data, features.record_kind())?;
    let mut cfg = settings.train_config()?;
    for (key, slot) in [("train.epoch_scale", &mut cfg.epoch_scale), ("train.lambda", &mut cfg.lambda)] {
        if let Some(v) = file.meta.get(key) {
            *slot = v.parse().with_context(|| format!("bad {key}"))?;
        }
    }
    if let Some(s) = settings.get(None, "epoch_scale")? {
        cfg.epoch_scale = s;
    }
    let baseline: f64 = file
        .meta
        .get("train.best_valid_msle")
        .ok_or_else(|| anyhow!("model lacks train.best_valid_msle"))?
        .parse()?;
    let th = thresholds(&features);
    let train_set = LabeledSet::label(&ds, &features, &queries_from_meta(&file, "train")?, &th)?;
    let valid_set = LabeledSet::label(&ds, &features, &queries_from_meta(&file, "valid")?, &th)?;
    let default_max = ((cfg.total_epochs() as f64) * 0.2).floor().max(1.0) as usize;
    let max_epochs = settings.or(a.max_epochs, "max_epochs", default_max)?;
    let out = train::incremental_update(&file.model, &ds, &train_set, &valid_set, baseline, &cfg, max_epochs)?;
    eprintln!(
        "update: fine_tuned={} epochs={} valid MSLE {:.4} -> {:.4}",
        out.fine_tuned, out.epochs, out.relabeled_valid_msle, out.final_valid_msle
    );
    let mut next = ModelFile {
        model: out.model,
        meta: file.meta.clone(),
    };
    next.meta.insert("train.best_valid_msle".into(), format!("{:?}", out.final_valid_msle));
    next.meta.insert("update.fine_tuned".into(), out.fine_tuned.to_string());
    next.meta.insert("update.epochs".into(), out.epochs.to_string());
    next.meta.insert("update.seed".into(), cfg.seed.to_string());
    save_model(&a.out, &next)?;
    println!("fine_tuned={}", out.fine_tuned);
    println!("epochs={}", out.epochs);
    println!("valid_msle={:?}", out.final_valid_msle);
    Ok(())
}

fn cmd_plan(settings: &Settings, a: PlanArgs) -> Result<()> {
    let ds = MultiAttrDataset::load_dir(&a.data)?;
    let seed = settings.seed()?;
    let workload = match &a.workload {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            planner::workload_from_text(&text, &ds)?
        }
        None => planner::synthetic_workload(&ds, settings.or(a.queries, "queries", 200)?, seed)?,
    };
    if let Some(p) = &a.save_workload {
        fs::write(p, planner::workload_to_text(&workload)).with_context(|| format!("writing {}", p.display()))?;
    }
    let name = settings.or(a.estimator, "estimator", "oracle".into())?;
    let mut boxed: Vec<Box<dyn CardinalityEstimator + '_>> = Vec::new();
    match name.as_str() {
        "cardnet" => {
            if a.models.len() != ds.num_attributes() {
                bail!(usage(format!("--models needs {} comma-separated paths", ds.num_attributes())));
            }
            for (m, attr) in a.models.iter().zip(ds.attributes()) {
                let model = load_model(m)?.model;
                if model.features != attr.features {
                    bail!("model {} was built for a different feature configuration than '{}'", m.display(), attr.name);
                }
                boxed.push(Box::new(model));
            }
        }
        "mean" => {
            for attr in ds.attributes() {
                boxed.push(Box::new(MeanEstimator::build(
                    &attr.dataset,
                    attr.features.clone(),
                    MeanEstimator::DEFAULT_QUERIES,
                    seed,
                )?));
            }
        }
        "sampling" => {
            for attr in ds.attributes() {
                boxed.push(Box::new(SamplingEstimator::new(&attr.dataset, SamplingEstimator::DEFAULT_RATIO, seed)?));
            }
        }
        "oracle" => {
            for attr in ds.attributes() {
                boxed.push(Box::new(OracleEstimator { dataset: &attr.dataset }));
            }
        }
        other => bail!(usage(format!("unknown estimator '{other}'"))),
    }
    let refs: Vec<&dyn CardinalityEstimator> = boxed.iter().map(|b| b.as_ref()).collect();
    let r = planner::planning_precision(&ds, &refs, &workload)?;
    println!("estimator={name}");
    println!("queries={}", r.queries);
    println!("correct={}", r.correct);
    println!("precision={:.1}", r.precision);
    println!("work={}", r.work);
    println!("optimal_work={}", r.optimal_work);
    println!("seed={seed}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(&cli.common)?;
    match cli.command {
        Command::GenData(a) => cmd_gen(&settings, a),
        Command::Extract(a) => cmd_extract(&settings, a),
        Command::Label(a) => cmd_label(&settings, a),
        Command::Train(a) => cmd_train(&settings, a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::Monotest(a) => cmd_monotest(&settings, a),
        Command::Update(a) => cmd_update(&settings, a),
        Command::Plan(a) => cmd_plan(&settings, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cardnet::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
