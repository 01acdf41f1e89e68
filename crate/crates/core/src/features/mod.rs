//! Feature extraction: records to fixed-width binary codes, thresholds to
//! integer bins `0..=tau_max`.

mod lsh;
mod normal;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use lsh::{minwise_code_with_orders, EuclideanLsh, MinwiseHasher};
pub use normal::norm_cdf;

use crate::bits::Bits;
use crate::data::{Dataset, Record, RecordKind};
use crate::error::{Error, Result};

pub type BinaryCode = Bits;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distance {
    Hamming,
    Edit,
    Jaccard,
    Euclidean,
}

impl Distance {
    pub fn record_kind(self) -> RecordKind {
        match self {
            Distance::Hamming => RecordKind::Bits,
            Distance::Edit => RecordKind::Text,
            Distance::Jaccard => RecordKind::Set,
            Distance::Euclidean => RecordKind::RealVec,
        }
    }

    /// Whether the distance only takes integer values.
    pub fn is_integral(self) -> bool {
        matches!(self, Distance::Hamming | Distance::Edit)
    }

    pub fn name(self) -> &'static str {
        match self {
            Distance::Hamming => "hamming",
            Distance::Edit => "edit",
            Distance::Jaccard => "jaccard",
            Distance::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamming" => Ok(Distance::Hamming),
            "edit" => Ok(Distance::Edit),
            "jaccard" => Ok(Distance::Jaccard),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::arg(format!("unknown distance {other:?}"))),
        }
    }
}

/// Collision probability of `floor((a.x + b) / r)` for two points at distance `theta`.
pub fn collision_probability(r: f64, theta: f64) -> Result<f64> {
    if !(r > 0.0) || !(theta > 0.0) {
        return Err(Error::arg(format!(
            "collision probability needs r > 0 and theta > 0 (got r={r}, theta={theta})"
        )));
    }
    let c = r / theta;
    let tail = 1.0 - (-c * c / 2.0).exp();
    Ok(1.0 - 2.0 * norm_cdf(-c) - 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * c) * tail)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Hamming { dim: usize },
    Edit { alphabet: Vec<char>, l_max: usize },
    Jaccard { hasher: MinwiseHasher, universe: u32 },
    Euclidean { lsh: EuclideanLsh },
}

/// The feature extraction `h = (h_rec, h_thr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub distance: Distance,
    pub theta_max: f64,
    pub tau_max: u32,
    pub encoder: Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedQuery {
    pub code: BinaryCode,
    pub tau: u32,
}

/// Knobs used when deriving a [`FeatureConfig`] from a dataset.
#[derive(Clone, Debug)]
pub struct FeatureOptions {
    pub jaccard_k: usize,
    pub jaccard_b: u32,
    pub euclid_k: usize,
    /// Bucket width; defaults to `theta_max`.
    pub euclid_r: Option<f64>,
    pub euclid_quantile: f64,
    pub euclid_fit_sample: usize,
    pub seed: u64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            jaccard_k: 256,
            jaccard_b: 1,
            euclid_k: 256,
            euclid_r: None,
            euclid_quantile: 0.999,
            euclid_fit_sample: 1000,
            seed: 0,
        }
    }
}

impl FeatureConfig {
    pub fn new(distance: Distance, theta_max: f64, tau_max: u32, encoder: Encoder) -> Result<Self> {
        let cfg = FeatureConfig {
            distance,
            theta_max,
            tau_max,
            encoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hamming(dim: usize, theta_max: f64, tau_max: u32) -> Result<Self> {
        Self::new(Distance::Hamming, theta_max, tau_max, Encoder::Hamming { dim })
    }

    pub fn edit(alphabet: Vec<char>, l_max: usize, theta_max: f64, tau_max: u32) -> Result<Self> {
        let mut alphabet = alphabet;
        alphabet.sort_unstable();
        alphabet.dedup();
        Self::new(Distance::Edit, theta_max, tau_max, Encoder::Edit { alphabet, l_max })
    }

    pub fn jaccard(hasher: MinwiseHasher, universe: u32, theta_max: f64, tau_max: u32) -> Result<Self> {
        Self::new(
            Distance::Jaccard,
            theta_max,
            tau_max,
            Encoder::Jaccard { hasher, universe },
        )
    }

    pub fn euclidean(lsh: EuclideanLsh, theta_max: f64, tau_max: u32) -> Result<Self> {
        Self::new(Distance::Euclidean, theta_max, tau_max, Encoder::Euclidean { lsh })
    }

    /// Derives encoder parameters (alphabet, `l_max`, universe, bucket range) from `ds`.
    pub fn for_dataset(
        ds: &Dataset,
        distance: Distance,
        theta_max: f64,
        tau_max: u32,
        opts: &FeatureOptions,
    ) -> Result<Self> {
        if ds.kind != distance.record_kind() {
            return Err(Error::KindMismatch {
                expected: distance.record_kind(),
                found: ds.kind,
            });
        }
        match distance {
            Distance::Hamming => Self::hamming(ds.dim, theta_max, tau_max),
            Distance::Edit => Self::edit(ds.alphabet.clone(), ds.l_max, theta_max, tau_max),
            Distance::Jaccard => Self::jaccard(
                MinwiseHasher::new(opts.jaccard_k, opts.jaccard_b, opts.seed)?,
                ds.universe,
                theta_max,
                tau_max,
            ),
            Distance::Euclidean => {
                let r = opts.euclid_r.unwrap_or(theta_max);
                let lsh = EuclideanLsh::new(opts.euclid_k, r, opts.seed, ds.dim)?;
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
                let n = opts.euclid_fit_sample.min(ds.len());
                let idx = rand::seq::index::sample(&mut rng, ds.len(), n);
                let sample = idx
                    .iter()
                    .map(|i| ds.records[i].as_real())
                    .collect::<Result<Vec<_>>>()?;
                let lsh = lsh.fit_range(&sample, opts.euclid_quantile)?;
                Self::euclidean(lsh, theta_max, tau_max)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau_max < 1 {
            return Err(Error::config("tau_max must be at least 1"));
        }
        if !(self.theta_max > 0.0 && self.theta_max.is_finite()) {
            return Err(Error::config(format!("theta_max = {} must be positive", self.theta_max)));
        }
        if self.distance.is_integral() && self.theta_max.fract() != 0.0 {
            return Err(Error::config(format!(
                "theta_max = {} must be an integer for {} distance",
                self.theta_max, self.distance
            )));
        }
        if self.distance == Distance::Jaccard && self.theta_max > 1.0 {
            return Err(Error::config("jaccard theta_max cannot exceed 1"));
        }
        let kind_ok = matches!(
            (self.distance, &self.encoder),
            (Distance::Hamming, Encoder::Hamming { .. })
                | (Distance::Edit, Encoder::Edit { .. })
                | (Distance::Jaccard, Encoder::Jaccard { .. })
                | (Distance::Euclidean, Encoder::Euclidean { .. })
        );
        if !kind_ok {
            return Err(Error::config("encoder does not match distance"));
        }
        if let Encoder::Euclidean { lsh } = &self.encoder {
            let far = 1.0 - collision_probability(lsh.r, self.theta_max)?;
            if far < 1e-6 {
                return Err(Error::config(format!(
                    "1 - eps(theta_max) = {far:e} is below 1e-6; increase theta_max or shrink r"
                )));
            }
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        match &self.encoder {
            Encoder::Hamming { dim } => *dim,
            Encoder::Edit { alphabet, l_max } => {
                (l_max + 2 * self.tau_max as usize) * alphabet.len()
            }
            Encoder::Jaccard { hasher, .. } => hasher.code_dim(),
            Encoder::Euclidean { lsh } => lsh.code_dim(),
        }
    }

    pub fn record_kind(&self) -> RecordKind {
        self.distance.record_kind()
    }

    /// `h_rec`: the binary representation of a record.
    pub fn encode(&self, record: &Record) -> Result<BinaryCode> {
        match &self.encoder {
            Encoder::Hamming { dim } => {
                let bits = record.as_bits()?;
                if bits.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        found: bits.len(),
                    });
                }
                Ok(bits.clone())
            }
            Encoder::Edit { alphabet, l_max } => {
                self.encode_text(record.as_text()?, alphabet, *l_max)
            }
            Encoder::Jaccard { hasher, universe } => {
                let set = record.as_set()?;
                if let Some(&big) = set.iter().find(|&&e| e >= *universe) {
                    return Err(Error::InvalidRecord(format!(
                        "element {big} outside universe of size {universe}"
                    )));
                }
                hasher.encode(set)
            }
            Encoder::Euclidean { lsh } => lsh.encode(record.as_real()?),
        }
    }

    fn encode_text(&self, s: &[char], alphabet: &[char], l_max: usize) -> Result<BinaryCode> {
        if s.len() > l_max {
            return Err(Error::InvalidRecord(format!(
                "string of length {} exceeds l_max = {l_max}",
                s.len()
            )));
        }
        let tau = self.tau_max as usize;
        let group = l_max + 2 * tau;
        let mut out = Bits::zeros(group * alphabet.len());
        for (i, c) in s.iter().enumerate() {
            let g = alphabet
                .binary_search(c)
                .map_err(|_| Error::InvalidRecord(format!("character {c:?} not in alphabet")))?;
            // Window i - tau ..= i + tau, with group subscripts starting at -tau.
            for off in i..=i + 2 * tau {
                out.set(g * group + off);
            }
        }
        Ok(out)
    }

    fn check_theta(&self, theta: f64) -> Result<()> {
        if !(theta >= 0.0 && theta <= self.theta_max) {
            return Err(Error::arg(format!(
                "threshold {theta} outside [0, {}]",
                self.theta_max
            )));
        }
        Ok(())
    }

    /// `h_thr`: monotone map of `theta` into `0..=tau_max`.
    pub fn map_threshold(&self, theta: f64) -> Result<u32> {
        self.check_theta(theta)?;
        let tau_max = self.tau_max as f64;
        let tau = match self.distance {
            Distance::Hamming | Distance::Edit => {
                if self.theta_max <= tau_max {
                    theta.floor()
                } else {
                    (tau_max * theta / self.theta_max).floor()
                }
            }
            Distance::Jaccard => (tau_max * theta / self.theta_max).floor(),
            Distance::Euclidean => {
                let Encoder::Euclidean { lsh } = &self.encoder else {
                    unreachable!("validated")
                };
                let far = |t: f64| -> Result<f64> {
                    if t == 0.0 {
                        Ok(0.0)
                    } else {
                        Ok(1.0 - collision_probability(lsh.r, t)?)
                    }
                };
                (tau_max * far(theta)? / far(self.theta_max)?).floor()
            }
        };
        Ok((tau.max(0.0) as u32).min(self.tau_max))
    }

    pub fn extract(&self, record: &Record, theta: f64) -> Result<ExtractedQuery> {
        Ok(ExtractedQuery {
            code: self.encode(record)?,
            tau: self.map_threshold(theta)?,
        })
    }

    /// Bin of an original-space distance: `map_threshold(f)` when `f <= theta_max`.
    pub fn bin_of_distance(&self, f: f64) -> Option<u32> {
        if f <= self.theta_max {
            self.map_threshold(f).ok()
        } else {
            None
        }
    }

    /// Largest threshold mapping to bin `i`, or `None` if no threshold does.
    pub fn bin_upper(&self, i: u32) -> Option<f64> {
        if i > self.tau_max {
            return None;
        }
        if i == self.tau_max {
            return (self.map_threshold(self.theta_max).ok()? == i).then_some(self.theta_max);
        }
        match self.distance {
            Distance::Hamming | Distance::Edit => {
                let theta_max = self.theta_max as u64;
                let tau_max = self.tau_max as u64;
                let t = if theta_max <= tau_max {
                    i as u64
                } else {
                    ((i as u64 + 1) * theta_max - 1) / tau_max
                };
                let t = t.min(theta_max) as f64;
                (self.map_threshold(t).ok()? == i).then_some(t)
            }
            Distance::Jaccard => {
                let mut t = ((i as f64 + 1.0) * self.theta_max / self.tau_max as f64).min(self.theta_max);
                while t > 0.0 && self.map_threshold(t).ok()? > i {
                    t = t.next_down();
                }
                loop {
                    let up = t.next_up();
                    if up > self.theta_max || self.map_threshold(up).ok()? > i {
                        break;
                    }
                    t = up;
                }
                (self.map_threshold(t).ok()? == i).then_some(t)
            }
            Distance::Euclidean => {
                let tol = 1e-9 * self.theta_max;
                let (mut lo, mut hi) = (0.0, self.theta_max);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if self.map_threshold(mid).ok()? <= i {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (self.map_threshold(lo).ok()? == i).then_some(lo)
            }
        }
    }

    /// Bin upper boundaries for `0..=tau_max`.
    pub fn bin_uppers(&self) -> Vec<Option<f64>> {
        (0..=self.tau_max).map(|i| self.bin_upper(i)).collect()
    }

    /// Default label thresholds: every integer in `0..=theta_max` for integer
    /// distances, otherwise `points` evenly spaced values in `[0, theta_max]`.
    pub fn label_thresholds(&self, points: usize) -> Vec<f64> {
        if self.distance.is_integral() {
            (0..=self.theta_max as u64).map(|t| t as f64).collect()
        } else {
            let n = points.max(2);
            (0..n)
                .map(|j| self.theta_max * j as f64 / (n - 1) as f64)
                .collect()
        }
    }

    /// Flat `key=value` form, including all seeds and fitted ranges.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("feature.distance".to_string(), self.distance.to_string()),
            ("feature.theta_max".to_string(), format!("{:?}", self.theta_max)),
            ("feature.tau_max".to_string(), self.tau_max.to_string()),
        ];
        let mut put = |k: &str, v: String| kv.push((format!("feature.{k}"), v));
        match &self.encoder {
            Encoder::Hamming { dim } => put("dim", dim.to_string()),
            Encoder::Edit { alphabet, l_max } => {
                put(
                    "alphabet",
                    alphabet
                        .iter()
                        .map(|c| (*c as u32).to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
                put("l_max", l_max.to_string());
            }
            Encoder::Jaccard { hasher, universe } => {
                put("k", hasher.k.to_string());
                put("b", hasher.b.to_string());
                put("seed", hasher.seed.to_string());
                put("universe", universe.to_string());
            }
            Encoder::Euclidean { lsh } => {
                put("k", lsh.k.to_string());
                put("r", format!("{:?}", lsh.r));
                put("seed", lsh.seed.to_string());
                put("input_dim", lsh.input_dim.to_string());
                put("v", lsh.v.to_string());
                put(
                    "offsets",
                    lsh.offsets
                        .iter()
                        .map(|o| o.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
            }
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            kv.get(&format!("feature.{k}"))
                .map(|s| s.as_str())
                .ok_or_else(|| Error::config(format!("missing key feature.{k}")))
        };
        fn num<T: FromStr>(key: &str, s: &str) -> Result<T> {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("bad value for feature.{key}: {s:?}")))
        }
        let list = |key: &str| -> Result<Vec<String>> {
            let s = get(key)?;
            Ok(if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            })
        };
        let distance: Distance = get("distance")?.parse()?;
        let theta_max: f64 = num("theta_max", get("theta_max")?)?;
        let tau_max: u32 = num("tau_max", get("tau_max")?)?;
        let encoder = match distance {
            Distance::Hamming => Encoder::Hamming {
                dim: num("dim", get("dim")?)?,
            },
            Distance::Edit => Encoder::Edit {
                alphabet: list("alphabet")?
                    .iter()
                    .map(|c| {
                        num::<u32>("alphabet", c).and_then(|u| {
                            char::from_u32(u).ok_or_else(|| Error::config("bad alphabet code point"))
                        })
                    })
                    .collect::<Result<_>>()?,
                l_max: num("l_max", get("l_max")?)?,
            },
            Distance::Jaccard => Encoder::Jaccard {
                hasher: MinwiseHasher::new(
                    num("k", get("k")?)?,
                    num("b", get("b")?)?,
                    num("seed", get("seed")?)?,
                )?,
                universe: num("universe", get("universe")?)?,
            },
            Distance::Euclidean => {
                let offsets = list("offsets")?
                    .iter()
                    .map(|o| num::<i64>("offsets", o))
                    .collect::<Result<Vec<_>>>()?;
                Encoder::Euclidean {
                    lsh: EuclideanLsh::new(
                        num("k", get("k")?)?,
                        num("r", get("r")?)?,
                        num("seed", get("seed")?)?,
                        num("input_dim", get("input_dim")?)?,
                    )?
                    .with_range(offsets, num("v", get("v")?)?)?,
                }
            }
        };
        FeatureConfig::new(distance, theta_max, tau_max, encoder)
    }
}
