//! Synthetic stand-ins for a source (mandarin) corpus and several accent
//! corpora.
//!
//! Every regular symbol, plus silence at index 0, has a mean feature vector.
//! An utterance is a random symbol string rendered as runs of frames around
//! those means. An accent perturbs the rendering in three independent ways:
//! a constant feature offset, symbol substitutions in what is pronounced (the
//! label keeps the intended symbol), and a duration multiplier.

mod io;

pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const SOURCE_DOMAIN: &str = "G";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("symbol {0} has no emission mean")]
    MissingEmission(usize),
    #[error("invalid domain spec {domain}: {reason}")]
    InvalidSpec { domain: String, reason: String },
    #[error("unknown recipe {0:?}")]
    UnknownRecipe(String),
    #[error("count must be at least 1")]
    EmptyCount,
}

/// Pronunciation substitution: intended `from` is rendered with the mean of
/// `to` with probability `prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub accent_shift: Vec<f64>,
    pub confusion_pairs: Vec<ConfusionPair>,
    pub duration_scale: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn source(feature_dim: usize, noise_std: f64) -> Self {
        Self {
            domain_id: SOURCE_DOMAIN.to_string(),
            accent_shift: vec![0.0; feature_dim],
            confusion_pairs: Vec::new(),
            duration_scale: 1.0,
            noise_std,
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<(), SynthError> {
        let bad = |reason: String| {
            Err(SynthError::InvalidSpec {
                domain: self.domain_id.clone(),
                reason,
            })
        };
        if self.accent_shift.len() != feature_dim {
            return bad(format!(
                "accent_shift has {} entries, feature_dim is {feature_dim}",
                self.accent_shift.len()
            ));
        }
        if !(self.duration_scale > 0.0) || !(self.noise_std >= 0.0) {
            return bad("duration_scale must be > 0 and noise_std >= 0".into());
        }
        if self.confusion_pairs.iter().any(|c| !(0.0..=0.5).contains(&c.prob)) {
            return bad("swap probabilities must lie in [0, 0.5]".into());
        }
        if self.domain_id == SOURCE_DOMAIN
            && (self.accent_shift.iter().any(|&v| v != 0.0)
                || !self.confusion_pairs.is_empty()
                || self.duration_scale != 1.0)
        {
            return bad("the source domain has no shift, confusions or duration change".into());
        }
        Ok(())
    }
}

/// Mean feature vector per emission class; index 0 is silence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emissions {
    pub means: Vec<Vec<f64>>,
}

impl Emissions {
    pub fn random(num_symbols: usize, feature_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let means = (0..=num_symbols)
            .map(|_| (0..feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self { means }
    }

    pub fn num_symbols(&self) -> usize {
        self.means.len().saturating_sub(1)
    }

    /// Nearest mean (silence included) for each frame of a noiseless rendering.
    pub fn nearest(&self, frame: &[f64], shift: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d: f64 = m
                .iter()
                .zip(shift)
                .zip(frame)
                .map(|((m, s), x)| (x - m - s).powi(2))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub domain_id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Derives an order-independent RNG stream per utterance.
fn utterance_rng(seed: u64, domain_id: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(index);
    rng
}

pub const MIN_LABELS: usize = 2;
pub const MAX_LABELS: usize = 6;
/// Silence frames inserted between two identical neighbouring symbols.
pub const REPEAT_GAP: usize = 2;

/// Renders `count` utterances of one domain. Utterance `i` depends only on
/// `(seed, spec.domain_id, first_index + i)`.
pub fn generate_domain(
    spec: &DomainSpec,
    emissions: &Emissions,
    count: usize,
    seed: u64,
    first_index: u64,
) -> Result<Vec<Utterance>, SynthError> {
    Ok(render_domain(spec, emissions, count, seed, first_index)?
        .into_iter()
        .map(|(u, _)| u)
        .collect())
}

/// Like [`generate_domain`], also returning the symbol actually pronounced
/// for each label.
pub fn render_domain(
    spec: &DomainSpec,
    emissions: &Emissions,
    count: usize,
    seed: u64,
    first_index: u64,
) -> Result<Vec<(Utterance, Vec<usize>)>, SynthError> {
    if count == 0 {
        return Err(SynthError::EmptyCount);
    }
    let dim = emissions.means.first().map_or(0, Vec::len);
    spec.validate(dim)?;
    let n = emissions.num_symbols();
    if n == 0 {
        return Err(SynthError::MissingEmission(1));
    }
    if let Some(c) = spec
        .confusion_pairs
        .iter()
        .find(|c| c.from == 0 || c.from > n || c.to == 0 || c.to > n)
    {
        return Err(SynthError::MissingEmission(c.from.max(c.to)));
    }
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut out = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let index = first_index + i;
        let mut rng = utterance_rng(seed, &spec.domain_id, index);
        let len = rng.gen_range(MIN_LABELS..=MAX_LABELS);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=n)).collect();

        let mut frames: Vec<f64> = Vec::new();
        let mut pronounced = Vec::with_capacity(len);
        let emit = |class: usize, rng: &mut ChaCha8Rng, frames: &mut Vec<f64>| {
            for (m, s) in emissions.means[class].iter().zip(&spec.accent_shift) {
                let noise = if spec.noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
                frames.push(m + s + noise);
            }
        };
        emit(0, &mut rng, &mut frames);
        for (pos, &sym) in labels.iter().enumerate() {
            if pos > 0 && labels[pos - 1] == sym {
                for _ in 0..REPEAT_GAP {
                    emit(0, &mut rng, &mut frames);
                }
            }
            let mut spoken = sym;
            for c in spec.confusion_pairs.iter().filter(|c| c.from == sym) {
                if rng.gen::<f64>() < c.prob {
                    spoken = c.to;
                    break;
                }
            }
            pronounced.push(spoken);
            let base = rng.gen_range(2..=4) as f64;
            let dur = ((spec.duration_scale * base).round() as usize).max(2);
            for _ in 0..dur {
                emit(spoken, &mut rng, &mut frames);
            }
        }
        emit(0, &mut rng, &mut frames);

        let t = frames.len() / dim;
        out.push((
            Utterance {
                id: format!("{}-{index:06}", spec.domain_id),
                domain_id: spec.domain_id.clone(),
                features: Tensor::new(vec![t, dim], frames).expect("non-empty"),
                labels,
            },
            pronounced,
        ));
    }
    Ok(out)
}

/// Which training utterances a run sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Recipe {
    Mandarin,
    All,
    Accent,
    #[serde(rename = "Accent+")]
    AccentPlus,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Mandarin => "Mandarin",
            Recipe::All => "All",
            Recipe::Accent => "Accent",
            Recipe::AccentPlus => "Accent+",
        }
    }
}

impl std::str::FromStr for Recipe {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Mandarin" | "mandarin" => Ok(Recipe::Mandarin),
            "All" | "all" => Ok(Recipe::All),
            "Accent" | "accent" => Ok(Recipe::Accent),
            "Accent+" | "accent+" | "AccentPlus" => Ok(Recipe::AccentPlus),
            other => Err(SynthError::UnknownRecipe(other.to_string())),
        }
    }
}

/// Knobs for the default source + accent corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub num_symbols: usize,
    pub num_accents: usize,
    pub source_train: usize,
    pub accent_train: usize,
    pub source_test: usize,
    pub accent_test: usize,
    pub emission_scale: f64,
    pub noise_std: f64,
    pub accent_noise_std: f64,
    /// Length of the offset shared by every accent.
    pub common_shift: f64,
    /// Length of each accent's own offset.
    pub accent_shift: f64,
    /// Symbol pairs pronounced interchangeably; accent `k` takes pair
    /// `(k - 1) % len` in both directions.
    pub mergers: Vec<(usize, usize)>,
    pub merger_prob: f64,
    pub duration_range: (f64, f64),
    pub seed: u64,
    /// Explicit accent specs; generated from the knobs above when empty.
    pub accents: Vec<DomainSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            num_symbols: 10,
            num_accents: 11,
            source_train: 2000,
            accent_train: 200,
            source_test: 200,
            accent_test: 200,
            emission_scale: 1.0,
            noise_std: 0.6,
            accent_noise_std: 0.6,
            common_shift: 0.8,
            accent_shift: 0.5,
            mergers: vec![(1, 2), (3, 4)],
            merger_prob: 0.5,
            duration_range: (0.8, 1.4),
            seed: 2022,
            accents: Vec::new(),
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, length: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * length / norm).collect()
}

impl SynthConfig {
    pub fn emissions(&self) -> Emissions {
        Emissions::random(self.num_symbols, self.feature_dim, self.emission_scale, self.seed)
    }

    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec::source(self.feature_dim, self.noise_std)
    }

    /// Accent specs `A1..An`: a shared offset plus a per-accent offset, one
    /// two-way merger, and a random duration scale.
    pub fn accent_specs(&self) -> Vec<DomainSpec> {
        if !self.accents.is_empty() {
            return self.accents.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x5eed));
        let common = random_direction(&mut rng, self.feature_dim, self.common_shift);
        (1..=self.num_accents)
            .map(|k| {
                let own = random_direction(&mut rng, self.feature_dim, self.accent_shift);
                let shift = common.iter().zip(&own).map(|(a, b)| a + b).collect();
                let pairs = match self.mergers.get((k - 1) % self.mergers.len().max(1)) {
                    Some(&(a, b)) => vec![
                        ConfusionPair { from: a, to: b, prob: self.merger_prob },
                        ConfusionPair { from: b, to: a, prob: self.merger_prob },
                    ],
                    None => Vec::new(),
                };
                let (lo, hi) = self.duration_range;
                let duration_scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                DomainSpec {
                    domain_id: format!("A{k}"),
                    accent_shift: shift,
                    confusion_pairs: pairs,
                    duration_scale,
                    noise_std: self.accent_noise_std,
                }
            })
            .collect()
    }
}

/// Every generated utterance, before any recipe selects from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub emissions: Emissions,
    pub source: DomainSpec,
    pub accents: Vec<DomainSpec>,
    pub source_train: Vec<Utterance>,
    /// Source utterances beyond `source_train`, drawn only when Accent+
    /// needs more source data than the train set holds.
    pub source_extra: Vec<Utterance>,
    pub accent_train: Vec<Utterance>,
    pub source_test: Vec<Utterance>,
    pub accent_test: Vec<(String, Vec<Utterance>)>,
}

impl Corpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, SynthError> {
        let emissions = cfg.emissions();
        let source = cfg.source_spec();
        let accents = cfg.accent_specs();
        // train and test draw disjoint index ranges of the same stream
        let test_base = 1_000_000;
        let source_train = generate_domain(&source, &emissions, cfg.source_train, cfg.seed, 0)?;
        let source_test = generate_domain(&source, &emissions, cfg.source_test, cfg.seed, test_base)?;
        let mut accent_train = Vec::new();
        let mut accent_test = Vec::new();
        for spec in &accents {
            accent_train.extend(generate_domain(spec, &emissions, cfg.accent_train, cfg.seed, 0)?);
            accent_test.push((
                spec.domain_id.clone(),
                generate_domain(spec, &emissions, cfg.accent_test, cfg.seed, test_base)?,
            ));
        }
        let shortfall = accent_train.len().saturating_sub(source_train.len());
        let source_extra = if shortfall > 0 {
            generate_domain(&source, &emissions, shortfall, cfg.seed, cfg.source_train as u64)?
        } else {
            Vec::new()
        };
        Ok(Self {
            emissions,
            source,
            accents,
            source_train,
            source_extra,
            accent_train,
            source_test,
            accent_test,
        })
    }

    /// Selects the training set for `recipe`; test sets are shared by all recipes.
    /// Accent+ pairs the accent data with an equally sized random sample of
    /// source data, topped up from `source_extra` when the train set is smaller.
    pub fn partition(&self, recipe: Recipe, seed: u64) -> Result<DatasetPartition, SynthError> {
        let train = match recipe {
            Recipe::Mandarin => self.source_train.clone(),
            Recipe::All => self.source_train.iter().chain(&self.accent_train).cloned().collect(),
            Recipe::Accent => self.accent_train.clone(),
            Recipe::AccentPlus => {
                let needed = self.accent_train.len();
                let mut train = self.accent_train.clone();
                if needed >= self.source_train.len() {
                    train.extend(self.source_train.iter().cloned());
                    train.extend(self.source_extra.iter().take(needed - self.source_train.len()).cloned());
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut picked: Vec<usize> =
                        rand::seq::index::sample(&mut rng, self.source_train.len(), needed).into_vec();
                    picked.sort_unstable();
                    train.extend(picked.into_iter().map(|i| self.source_train[i].clone()));
                }
                train
            }
        };
        Ok(DatasetPartition {
            train,
            test_source: self.source_test.clone(),
            test_accent: self.accent_test.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub train: Vec<Utterance>,
    pub test_source: Vec<Utterance>,
    /// Per accent domain, in declaration order.
    pub test_accent: Vec<(String, Vec<Utterance>)>,
}

impl DatasetPartition {
    pub fn train_ids_disjoint_from_test(&self) -> bool {
        let test: std::collections::HashSet<&str> = self
            .test_source
            .iter()
            .chain(self.test_accent.iter().flat_map(|(_, u)| u))
            .map(|u| u.id.as_str())
            .collect();
        self.train.iter().all(|u| !test.contains(u.id.as_str()))
    }
}

/// Generates the corpus for `cfg` and selects `recipe`.
pub fn build_partitions(recipe: Recipe, cfg: &SynthConfig, seed: u64) -> Result<DatasetPartition, SynthError> {
    Corpus::generate(cfg)?.partition(recipe, seed)
}

#[cfg(test)]
mod tests;
