use std::fmt;

use crate::error::{Error, Result};

/// Which encoder topology is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// One transformer stack with a single CTC head.
    BaselineSingle,
    /// Shared stack, two language experts, concatenation + projection.
    ConcatLae,
    /// Shared stack, two language experts, frame-level gated mixture.
    MoeLae,
}

impl System {
    pub const ALL: [System; 3] = [System::BaselineSingle, System::ConcatLae, System::MoeLae];

    pub fn as_str(self) -> &'static str {
        match self {
            System::BaselineSingle => "baseline_single",
            System::ConcatLae => "concat_lae",
            System::MoeLae => "moe_lae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline_single" => Ok(System::BaselineSingle),
            "concat_lae" => Ok(System::ConcatLae),
            "moe_lae" => Ok(System::MoeLae),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }

    pub fn fusion(self) -> Option<FusionMode> {
        match self {
            System::BaselineSingle => None,
            System::ConcatLae => Some(FusionMode::Concat),
            System::MoeLae => Some(FusionMode::Moe),
        }
    }

    pub fn has_experts(self) -> bool {
        self.fusion().is_some()
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Moe,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_shared_blocks: usize,
    pub n_specific_blocks: usize,
    pub vocab_size: usize,
    pub system: System,
    pub disentangle: bool,
}

impl ModelConfig {
    /// Desk-scale layout keeping the 3:1:1 shared/expert block ratio.
    pub fn desk(feature_dim: usize, vocab_size: usize, system: System, disentangle: bool) -> Self {
        Self {
            feature_dim,
            d_model: 32,
            ff_dim: 64,
            n_heads: 2,
            n_shared_blocks: 3,
            n_specific_blocks: 1,
            vocab_size,
            system,
            disentangle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("ff_dim", self.ff_dim),
            ("n_heads", self.n_heads),
            ("n_shared_blocks", self.n_shared_blocks),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_specific_blocks == 0 {
            return Err(Error::Config("n_specific_blocks must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must include blank and a label".into()));
        }
        Ok(())
    }

    /// Number of blocks in the shared (or, for the baseline, the only) stack.
    /// The baseline gets the LAE systems' total block count.
    pub fn shared_stack_depth(&self) -> usize {
        match self.system {
            System::BaselineSingle => self.n_shared_blocks + 2 * self.n_specific_blocks,
            _ => self.n_shared_blocks,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical `key=value` list; identical configs give identical strings.
    pub fn fingerprint(&self) -> String {
        format!(
            "system={},feature_dim={},d_model={},ff_dim={},n_heads={},n_shared_blocks={},n_specific_blocks={},vocab_size={},disentangle={}",
            self.system,
            self.feature_dim,
            self.d_model,
            self.ff_dim,
            self.n_heads,
            self.n_shared_blocks,
            self.n_specific_blocks,
            self.vocab_size,
            self.disentangle
        )
    }

    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk(1, 2, System::BaselineSingle, false);
        let mut seen = 0;
        for pair in s.split(',') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad fingerprint field {pair:?}")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "system" => cfg.system = System::parse(v)?,
                "feature_dim" => cfg.feature_dim = num()?,
                "d_model" => cfg.d_model = num()?,
                "ff_dim" => cfg.ff_dim = num()?,
                "n_heads" => cfg.n_heads = num()?,
                "n_shared_blocks" => cfg.n_shared_blocks = num()?,
                "n_specific_blocks" => cfg.n_specific_blocks = num()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "disentangle" => {
                    cfg.disentangle = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))?
                }
                other => return Err(Error::Config(format!("unknown fingerprint field {other:?}"))),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Config(format!("fingerprint has {seen} of 9 fields")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
