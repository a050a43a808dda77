//! Synthetic bilingual code-switching corpus.
//!
//! Each token owns a mean vector living in its language's half of the feature
//! space; an utterance repeats that mean for a sampled number of frames and adds
//! isotropic Gaussian noise. Language sequences follow a two-state Markov chain
//! whose stationary distribution equals the split's target ratio.

mod io;

pub use io::{read_corpus, read_split, read_vocabulary, write_corpus, write_split, write_vocabulary};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::objective::{Lang, TokenSequence, Vocabulary};
use crate::tensorcore::Tensor;

/// Accepted gap between realized and target language-A share.
pub const RATIO_TOLERANCE: f64 = 0.03;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub name: String,
    pub size: usize,
    /// Target share of language-A tokens.
    pub ratio_a: f64,
    /// Mean per-token switch probability at a balanced ratio.
    pub p_switch: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_a: usize,
    pub n_b: usize,
    pub feature_dim: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of token means on their own block.
    pub mean_scale: f64,
    pub sigma: f64,
    pub splits: Vec<SplitSpec>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let split = |name: &str, size, ratio_a, p_switch| SplitSpec {
            name: name.into(),
            size,
            ratio_a,
            p_switch,
        };
        Self {
            n_a: 10,
            n_b: 10,
            feature_dim: 16,
            t_min: 3,
            t_max: 5,
            min_tokens: 4,
            max_tokens: 10,
            mean_scale: 1.0,
            sigma: 1.0,
            splits: vec![
                split("train", 2000, 0.68, 0.25),
                split("valid", 200, 0.67, 0.25),
                split("dev_A_heavy", 200, 0.74, 0.15),
                split("dev_B_heavy", 200, 0.37, 0.35),
            ],
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_a == 0 || self.n_b == 0 {
            return bad("each language needs at least one token".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        // t_min * S >= 2S + 1 for every S >= 1 needs t_min >= 3
        if self.t_min < 3 {
            return bad(format!("t_min {} cannot guarantee CTC feasibility (need >= 3)", self.t_min));
        }
        if self.t_max < self.t_min {
            return bad("t_max < t_min".into());
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return bad("token range must satisfy 1 <= min <= max".into());
        }
        if !(self.sigma >= 0.0) || !(self.mean_scale > 0.0) {
            return bad("sigma must be >= 0 and mean_scale > 0".into());
        }
        for s in &self.splits {
            if !(s.ratio_a > 0.0 && s.ratio_a < 1.0) {
                return bad(format!("{}: ratio must lie in (0, 1)", s.name));
            }
            if !(0.0..=1.0).contains(&s.p_switch) {
                return bad(format!("{}: p_switch must lie in [0, 1]", s.name));
            }
            let (a, b) = transition_probs(s);
            if a > 1.0 || b > 1.0 {
                return bad(format!("{}: p_switch too large for ratio {}", s.name, s.ratio_a));
            }
        }
        Ok(())
    }

    /// Reads `key = value` overrides on top of the defaults. Split keys look
    /// like `train.size`, `dev_B_heavy.ratio_a` or `valid.p_switch`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let mut spec = SynthSpec::default();
        kv.take("n_a", &mut spec.n_a)?;
        kv.take("n_b", &mut spec.n_b)?;
        kv.take("feature_dim", &mut spec.feature_dim)?;
        kv.take("t_min", &mut spec.t_min)?;
        kv.take("t_max", &mut spec.t_max)?;
        kv.take("min_tokens", &mut spec.min_tokens)?;
        kv.take("max_tokens", &mut spec.max_tokens)?;
        kv.take("mean_scale", &mut spec.mean_scale)?;
        kv.take("sigma", &mut spec.sigma)?;
        kv.take("seed", &mut spec.seed)?;
        for s in &mut spec.splits {
            kv.take(&format!("{}.size", s.name), &mut s.size)?;
            kv.take(&format!("{}.ratio_a", s.name), &mut s.ratio_a)?;
            kv.take(&format!("{}.p_switch", s.name), &mut s.p_switch)?;
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "n_a = {}\nn_b = {}\nfeature_dim = {}\nt_min = {}\nt_max = {}\nmin_tokens = {}\nmax_tokens = {}\nmean_scale = {}\nsigma = {}\nseed = {}\n",
            self.n_a,
            self.n_b,
            self.feature_dim,
            self.t_min,
            self.t_max,
            self.min_tokens,
            self.max_tokens,
            self.mean_scale,
            self.sigma,
            self.seed
        );
        for s in &self.splits {
            out += &format!(
                "{0}.size = {1}\n{0}.ratio_a = {2}\n{0}.p_switch = {3}\n",
                s.name, s.size, s.ratio_a, s.p_switch
            );
        }
        out
    }
}

/// Switch probabilities `(A -> B, B -> A)` whose chain has stationary
/// `P(A) = ratio_a` and switches with probability `p_switch` at ratio 1/2.
fn transition_probs(s: &SplitSpec) -> (f64, f64) {
    let r = s.ratio_a;
    (2.0 * s.p_switch * (1.0 - r), 2.0 * s.p_switch * r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `L x D` features.
    pub features: Tensor,
    pub reference: TokenSequence,
    /// Frames spent on each reference token; sums to `L`.
    pub durations: Vec<usize>,
    pub switch_count: usize,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True language of every frame, from the token segmentation.
    pub fn frame_langs(&self, vocab: &Vocabulary) -> Result<Vec<Lang>> {
        let mut out = Vec::with_capacity(self.len());
        for (&t, &d) in self.reference.tokens().iter().zip(&self.durations) {
            let lang = vocab
                .tag(t)
                .and_then(|tag| tag.lang())
                .ok_or(Error::UnknownToken(t))?;
            out.extend(std::iter::repeat_n(lang, d));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

impl DatasetSplit {
    /// Share of reference tokens belonging to language A.
    pub fn realized_ratio(&self, vocab: &Vocabulary) -> f64 {
        let (mut a, mut total) = (0usize, 0usize);
        for u in &self.utterances {
            for &t in u.reference.tokens() {
                total += 1;
                if vocab.tag(t).and_then(|g| g.lang()) == Some(Lang::A) {
                    a += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            a as f64 / total as f64
        }
    }

    /// Mean number of language switches per reference token.
    pub fn switches_per_token(&self) -> f64 {
        let switches: usize = self.utterances.iter().map(|u| u.switch_count).sum();
        let tokens: usize = self.utterances.iter().map(|u| u.reference.len()).sum();
        if tokens == 0 {
            0.0
        } else {
            switches as f64 / tokens as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub splits: Vec<DatasetSplit>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("corpus has no split {name:?}")))
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.splits
            .iter()
            .flat_map(|s| s.utterances.first())
            .map(|u| u.features.last_dim())
            .next()
    }
}

pub fn build_vocabulary(spec: &SynthSpec) -> Vocabulary {
    Vocabulary::bilingual(spec.n_a, spec.n_b)
}

/// Per-token mean vectors, indexed by vocabulary id. Language-A means occupy
/// the first half of the coordinates and language-B means the second half.
pub fn emission_means(spec: &SynthSpec, vocab: &Vocabulary) -> Vec<Vec<f64>> {
    let d = spec.feature_dim;
    let half = d / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let dist = Normal::new(0.0, spec.mean_scale).expect("validated scale");
    (0..vocab.len())
        .map(|t| {
            let mut m = vec![0.0; d];
            let block = match vocab.tag(t).and_then(|g| g.lang()) {
                Some(Lang::A) if !vocab.is_mask(t) => 0..half,
                Some(Lang::B) if !vocab.is_mask(t) => half..d,
                _ => return m,
            };
            for k in block {
                m[k] = dist.sample(&mut rng);
            }
            m
        })
        .collect()
}

fn sample_split(
    spec: &SynthSpec,
    split: &SplitSpec,
    vocab: &Vocabulary,
    means: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> DatasetSplit {
    let (a_to_b, b_to_a) = transition_probs(split);
    let tokens_a = vocab.tokens_of(Lang::A);
    let tokens_b = vocab.tokens_of(Lang::B);
    let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
    let d = spec.feature_dim;
    let mut utterances = Vec::with_capacity(split.size);
    for i in 0..split.size {
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut lang = if rng.random_bool(split.ratio_a) { Lang::A } else { Lang::B };
        let mut reference = Vec::with_capacity(n);
        let mut switch_count = 0;
        for s in 0..n {
            if s > 0 {
                let p = if lang == Lang::A { a_to_b } else { b_to_a };
                if rng.random_bool(p) {
                    lang = lang.other();
                    switch_count += 1;
                }
            }
            let pool = if lang == Lang::A { &tokens_a } else { &tokens_b };
            reference.push(pool[rng.random_range(0..pool.len())]);
        }
        let durations: Vec<usize> = (0..n).map(|_| rng.random_range(spec.t_min..=spec.t_max)).collect();
        let frames: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(frames * d);
        for (&t, &dur) in reference.iter().zip(&durations) {
            for _ in 0..dur {
                for k in 0..d {
                    let e = if spec.sigma == 0.0 { 0.0 } else { noise.sample(rng) };
                    data.push(means[t][k] + e);
                }
            }
        }
        utterances.push(Utterance {
            id: format!("{}-{i:05}", split.name),
            features: Tensor::from_parts(vec![frames, d], data),
            reference: TokenSequence(reference),
            durations,
            switch_count,
        });
    }
    DatasetSplit {
        name: split.name.clone(),
        utterances,
    }
}

/// Generates every split of `spec`. Each split is resampled with a derived
/// stream until its language ratio lands within [`RATIO_TOLERANCE`].
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = build_vocabulary(spec);
    let means = emission_means(spec, &vocab);
    let mut splits = Vec::with_capacity(spec.splits.len());
    for (idx, split) in spec.splits.iter().enumerate() {
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64 * MAX_ATTEMPTS + attempt);
            let sampled = sample_split(spec, split, &vocab, &means, &mut rng);
            let ok = sampled.utterances.is_empty()
                || (sampled.realized_ratio(&vocab) - split.ratio_a).abs() <= RATIO_TOLERANCE;
            if ok {
                if attempt > 0 {
                    log::debug!("{}: ratio accepted after {} resamples", split.name, attempt);
                }
                accepted = Some(sampled);
                break;
            }
        }
        let sampled = accepted.ok_or_else(|| {
            Error::InfeasibleSpec(format!(
                "{}: ratio {} not reached within {MAX_ATTEMPTS} attempts",
                split.name, split.ratio_a
            ))
        })?;
        splits.push(sampled);
    }
    Ok(Corpus { vocab, splits })
}
