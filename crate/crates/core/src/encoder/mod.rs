//! Transformer encoder stacks, the language experts and their fusion.
//!
//! Every operation records onto a [`Graph`], a tape paired with a parameter
//! set whose leaves are registered on first use. Blocks use pre-layer-norm
//! wiring:
//!
//! ```text
//! h = h + Attn(LN1(h))
//! h = h + W2 relu(W1 LN2(h) + b1) + b2
//! ```
//!
//! and each stack ends with its own layer norm.

mod config;
mod params;

use std::collections::{BTreeMap, HashMap};

pub use config::{FusionMode, ModelConfig, System};
pub use params::{param_group, Parameters};

use params::{expert_prefix, head_prefix};

use crate::error::{Error, Result};
use crate::objective::Lang;
use crate::tensorcore::{Gradients, NodeId, Tape, Tensor};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Shared,
    Expert(Lang),
    Concat,
    Moe,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Shared => "shared",
            Origin::Expert(Lang::A) => "expert_a",
            Origin::Expert(Lang::B) => "expert_b",
            Origin::Concat => "concat",
            Origin::Moe => "moe",
        }
    }
}

/// `L x d_model` frames on a graph, tagged with the stage that produced them.
#[derive(Clone, Copy, Debug)]
pub struct HiddenSequence {
    pub node: NodeId,
    pub origin: Origin,
    pub len: usize,
}

/// `L x 2` softmax weights; column 0 weighs expert A, column 1 expert B.
#[derive(Clone, Copy, Debug)]
pub struct GatingWeights {
    pub node: NodeId,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Lang(Lang),
    Mix,
}

/// A tape plus lazily registered parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Parameters,
    leaves: HashMap<String, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        Self {
            tape: Tape::new(),
            params,
            leaves: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let id = self.tape.leaf(t);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        self.tape.value(node)
    }

    /// Gradients for every parameter; unused ones come back as zeros.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| {
                let g = match self.leaves.get(name) {
                    Some(&id) => grads.get(id),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    fn linear(&mut self, x: NodeId, w: &str, b: Option<&str>) -> Result<NodeId> {
        let wn = self.param(w)?;
        let y = self.tape.matmul(x, wn)?;
        match b {
            Some(b) => {
                let bn = self.param(b)?;
                self.tape.add(y, bn)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Sinusoidal table: `sin` on even columns, `cos` on odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

fn attention(g: &mut Graph, x: NodeId, prefix: &str, cfg: &ModelConfig) -> Result<NodeId> {
    let q = g.linear(x, &format!("{prefix}.attn.wq"), Some(&format!("{prefix}.attn.bq")))?;
    let k = g.linear(x, &format!("{prefix}.attn.wk"), Some(&format!("{prefix}.attn.bk")))?;
    let v = g.linear(x, &format!("{prefix}.attn.wv"), Some(&format!("{prefix}.attn.bv")))?;
    let widths = vec![cfg.head_dim(); cfg.n_heads];
    let (qs, ks, vs) = if cfg.n_heads == 1 {
        (vec![q], vec![k], vec![v])
    } else {
        (
            g.tape.split_last_dim(q, &widths)?,
            g.tape.split_last_dim(k, &widths)?,
            g.tape.split_last_dim(v, &widths)?,
        )
    };
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let kt = g.tape.transpose_last_two(ks[h])?;
        let scores = g.tape.matmul(qs[h], kt)?;
        let scores = g.tape.scale(scores, scale)?;
        let p = g.tape.softmax_last_dim(scores)?;
        heads.push(g.tape.matmul(p, vs[h])?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_last_dim(&heads)?
    };
    g.linear(merged, &format!("{prefix}.attn.wo"), Some(&format!("{prefix}.attn.bo")))
}

fn block(g: &mut Graph, h: NodeId, prefix: &str, cfg: &ModelConfig) -> Result<NodeId> {
    let a = g.norm(h, &format!("{prefix}.ln1"))?;
    let a = attention(g, a, prefix, cfg)?;
    let h = g.tape.add(h, a)?;
    let f = g.norm(h, &format!("{prefix}.ln2"))?;
    let f = g.linear(f, &format!("{prefix}.ff.w1"), Some(&format!("{prefix}.ff.b1")))?;
    let f = g.tape.relu(f)?;
    let f = g.linear(f, &format!("{prefix}.ff.w2"), Some(&format!("{prefix}.ff.b2")))?;
    g.tape.add(h, f)
}

fn stack(g: &mut Graph, mut h: NodeId, prefix: &str, depth: usize, cfg: &ModelConfig) -> Result<NodeId> {
    for i in 0..depth {
        h = block(g, h, &format!("{prefix}.{i}"), cfg)?;
    }
    g.norm(h, &format!("{prefix}.ln_f"))
}

/// Input projection, positional encoding and the shared stack. For the
/// single-stack baseline this is the whole encoder.
pub fn encode_shared(g: &mut Graph, x: &Tensor, cfg: &ModelConfig) -> Result<HiddenSequence> {
    if x.rank() != 2 || x.shape()[1] != cfg.feature_dim {
        return Err(Error::shape(
            "encode_shared",
            format!("expected L x {}, found {:?}", cfg.feature_dim, x.shape()),
        ));
    }
    let len = x.rows();
    let xn = g.tape.constant(x.clone());
    let h = g.linear(xn, "input.w", Some("input.b"))?;
    let pe = g.tape.constant(positional_encoding(len, cfg.d_model));
    let h = g.tape.add(h, pe)?;
    let node = stack(g, h, "shared", cfg.shared_stack_depth(), cfg)?;
    Ok(HiddenSequence {
        node,
        origin: Origin::Shared,
        len,
    })
}

pub fn encode_specific(g: &mut Graph, h: &HiddenSequence, lang: Lang, cfg: &ModelConfig) -> Result<HiddenSequence> {
    cfg.validate()?;
    if h.origin != Origin::Shared {
        return Err(Error::WrongOrigin {
            expected: "shared".into(),
            found: h.origin.as_str().into(),
        });
    }
    let node = stack(g, h.node, expert_prefix(lang), cfg.n_specific_blocks, cfg)?;
    Ok(HiddenSequence {
        node,
        origin: Origin::Expert(lang),
        len: h.len,
    })
}

fn check_pair(a: &HiddenSequence, b: &HiddenSequence) -> Result<()> {
    if a.len != b.len {
        return Err(Error::LengthMismatch(a.len, b.len));
    }
    for (h, lang) in [(a, Lang::A), (b, Lang::B)] {
        if h.origin != Origin::Expert(lang) {
            return Err(Error::WrongOrigin {
                expected: Origin::Expert(lang).as_str().into(),
                found: h.origin.as_str().into(),
            });
        }
    }
    Ok(())
}

/// One linear layer over `[H^A ; H^B]` followed by a softmax over two logits.
pub fn gate(g: &mut Graph, h_a: &HiddenSequence, h_b: &HiddenSequence) -> Result<GatingWeights> {
    check_pair(h_a, h_b)?;
    let cat = g.tape.concat_last_dim(&[h_a.node, h_b.node])?;
    let logits = g.linear(cat, "gate.w", Some("gate.b"))?;
    let node = g.tape.softmax_last_dim(logits)?;
    Ok(GatingWeights { node, len: h_a.len })
}

/// Frame-wise `g_A * H^A + g_B * H^B`.
pub fn combine_moe(
    g: &mut Graph,
    h_a: &HiddenSequence,
    h_b: &HiddenSequence,
    w: &GatingWeights,
) -> Result<HiddenSequence> {
    check_pair(h_a, h_b)?;
    if w.len != h_a.len {
        return Err(Error::LengthMismatch(w.len, h_a.len));
    }
    let cols = g.tape.split_last_dim(w.node, &[1, 1])?;
    let a = g.tape.mul(h_a.node, cols[0])?;
    let b = g.tape.mul(h_b.node, cols[1])?;
    let node = g.tape.add(a, b)?;
    Ok(HiddenSequence {
        node,
        origin: Origin::Moe,
        len: h_a.len,
    })
}

/// `[H^A ; H^B]` mapped back to `d_model` by a bias-free linear layer.
pub fn combine_concat(g: &mut Graph, h_a: &HiddenSequence, h_b: &HiddenSequence) -> Result<HiddenSequence> {
    check_pair(h_a, h_b)?;
    let cat = g.tape.concat_last_dim(&[h_a.node, h_b.node])?;
    let node = g.linear(cat, "concat.w", None)?;
    Ok(HiddenSequence {
        node,
        origin: Origin::Concat,
        len: h_a.len,
    })
}

/// Unnormalized `L x vocab_size` logits from the requested head.
pub fn project_to_logits(g: &mut Graph, h: &HiddenSequence, head: Head, cfg: &ModelConfig) -> Result<NodeId> {
    let ok = match head {
        Head::Lang(lang) => h.origin == Origin::Expert(lang),
        Head::Mix => match cfg.system {
            System::BaselineSingle => h.origin == Origin::Shared,
            System::ConcatLae => h.origin == Origin::Concat,
            System::MoeLae => h.origin == Origin::Moe,
        },
    };
    if !ok {
        let expected = match head {
            Head::Lang(lang) => Origin::Expert(lang).as_str(),
            Head::Mix => "fused",
        };
        return Err(Error::WrongOrigin {
            expected: expected.into(),
            found: h.origin.as_str().into(),
        });
    }
    let p = head_prefix(match head {
        Head::Lang(l) => Some(l),
        Head::Mix => None,
    });
    g.linear(h.node, &format!("{p}.w"), Some(&format!("{p}.b")))
}

/// All intermediate sequences of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub shared: HiddenSequence,
    pub experts: Option<(HiddenSequence, HiddenSequence)>,
    pub gating: Option<GatingWeights>,
    /// Input to the mixture head.
    pub fused: HiddenSequence,
}

pub fn encode(g: &mut Graph, x: &Tensor, cfg: &ModelConfig) -> Result<EncoderOutput> {
    let shared = encode_shared(g, x, cfg)?;
    let Some(fusion) = cfg.system.fusion() else {
        return Ok(EncoderOutput {
            shared,
            experts: None,
            gating: None,
            fused: shared,
        });
    };
    let h_a = encode_specific(g, &shared, Lang::A, cfg)?;
    let h_b = encode_specific(g, &shared, Lang::B, cfg)?;
    let (fused, gating) = match fusion {
        FusionMode::Moe => {
            let w = gate(g, &h_a, &h_b)?;
            (combine_moe(g, &h_a, &h_b, &w)?, Some(w))
        }
        FusionMode::Concat => (combine_concat(g, &h_a, &h_b)?, None),
    };
    Ok(EncoderOutput {
        shared,
        experts: Some((h_a, h_b)),
        gating,
        fused,
    })
}
