use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::objective::Lang;
use crate::tensorcore::Tensor;

pub(crate) fn expert_prefix(lang: Lang) -> &'static str {
    match lang {
        Lang::A => "expert_a",
        Lang::B => "expert_b",
    }
}

pub(crate) fn head_prefix(lang: Option<Lang>) -> &'static str {
    match lang {
        Some(Lang::A) => "head_a",
        Some(Lang::B) => "head_b",
        None => "head_mix",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Normal with std `1 / sqrt(fan_in)`.
    Scaled(usize),
    Zeros,
    Ones,
}

fn block_shapes(prefix: &str, cfg: &ModelConfig, out: &mut BTreeMap<String, (Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let f = cfg.ff_dim;
    let mut put = |name: &str, shape: Vec<usize>, init| {
        out.insert(format!("{prefix}.{name}"), (shape, init));
    };
    put("ln1.gain", vec![d], Init::Ones);
    put("ln1.bias", vec![d], Init::Zeros);
    for w in ["q", "k", "v", "o"] {
        put(&format!("attn.w{w}"), vec![d, d], Init::Scaled(d));
        put(&format!("attn.b{w}"), vec![d], Init::Zeros);
    }
    put("ln2.gain", vec![d], Init::Ones);
    put("ln2.bias", vec![d], Init::Zeros);
    put("ff.w1", vec![d, f], Init::Scaled(d));
    put("ff.b1", vec![f], Init::Zeros);
    put("ff.w2", vec![f, d], Init::Scaled(f));
    put("ff.b2", vec![d], Init::Zeros);
}

fn stack_shapes(prefix: &str, depth: usize, cfg: &ModelConfig, out: &mut BTreeMap<String, (Vec<usize>, Init)>) {
    for i in 0..depth {
        block_shapes(&format!("{prefix}.{i}"), cfg, out);
    }
    out.insert(format!("{prefix}.ln_f.gain"), (vec![cfg.d_model], Init::Ones));
    out.insert(format!("{prefix}.ln_f.bias"), (vec![cfg.d_model], Init::Zeros));
}

fn layout(cfg: &ModelConfig) -> BTreeMap<String, (Vec<usize>, Init)> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut out = BTreeMap::new();
    out.insert("input.w".into(), (vec![cfg.feature_dim, d], Init::Scaled(cfg.feature_dim)));
    out.insert("input.b".into(), (vec![d], Init::Zeros));
    stack_shapes("shared", cfg.shared_stack_depth(), cfg, &mut out);
    let mut heads = vec![None];
    if let Some(fusion) = cfg.system.fusion() {
        for lang in [Lang::A, Lang::B] {
            stack_shapes(expert_prefix(lang), cfg.n_specific_blocks, cfg, &mut out);
            heads.push(Some(lang));
        }
        match fusion {
            FusionMode::Moe => {
                out.insert("gate.w".into(), (vec![2 * d, 2], Init::Scaled(2 * d)));
                out.insert("gate.b".into(), (vec![2], Init::Zeros));
            }
            FusionMode::Concat => {
                out.insert("concat.w".into(), (vec![2 * d, d], Init::Scaled(2 * d)));
            }
        }
    }
    for head in heads {
        let p = head_prefix(head);
        out.insert(format!("{p}.w"), (vec![d, v], Init::Scaled(d)));
        out.insert(format!("{p}.b"), (vec![v], Init::Zeros));
    }
    out
}

/// Named parameter tensors of one model. The name set is closed: it is
/// exactly [`Parameters::shapes`] for the model's configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        layout(cfg).into_iter().map(|(k, (s, _))| (k, s)).collect()
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, (shape, init))| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Scaled(fan_in) => {
                        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Self { tensors })
    }

    /// All-zero parameters with unit layer-norm gains.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, (shape, init))| {
                let t = if init == Init::Ones {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Builds from an explicit map, checking it against the configuration.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let params = Self { tensors };
        params.check(cfg)?;
        Ok(params)
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::shapes(cfg);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(
                        "parameters",
                        format!("{name}: expected {shape:?}, found {:?}", t.shape()),
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Replaces an existing tensor of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "parameters",
                format!("{name}: expected {:?}, found {:?}", slot.shape(), value.shape()),
            )),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn group_count(&self, group: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| param_group(k) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

/// Coarse grouping used for gradient-flow checks: `shared` (including the
/// input projection), `expert_a`, `expert_b`, `gate`, `concat`, `heads`.
pub fn param_group(name: &str) -> &'static str {
    let head = name.split('.').next().unwrap_or("");
    match head {
        "input" | "shared" => "shared",
        "expert_a" => "expert_a",
        "expert_b" => "expert_b",
        "gate" => "gate",
        "concat" => "concat",
        h if h.starts_with("head_") => "heads",
        _ => "other",
    }
}
