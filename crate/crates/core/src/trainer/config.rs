use crate::encoder::{ModelConfig, System};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::objective::ObjectiveConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub checkpoint_average_k: usize,
    pub seed: u64,
    pub system: System,
    pub disentangle: bool,
    pub lambda: f64,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_shared_blocks: usize,
    pub n_specific_blocks: usize,
    pub beam_width: usize,
    /// Systems trained by the experiment matrix, as labels like `moe_lae+cd`.
    pub matrix_systems: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 5.0,
            checkpoint_average_k: 5,
            seed: 1,
            system: System::MoeLae,
            disentangle: true,
            lambda: 10.0,
            d_model: 32,
            ff_dim: 64,
            n_heads: 2,
            n_shared_blocks: 3,
            n_specific_blocks: 1,
            beam_width: 10,
            matrix_systems: MATRIX_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const MATRIX_LABELS: [&str; 5] = ["baseline_single", "concat_lae", "concat_lae+cd", "moe_lae", "moe_lae+cd"];

/// Splits a label such as `moe_lae+cd` into the system and its disentangle flag.
pub fn parse_label(label: &str) -> Result<(System, bool)> {
    let (name, cd) = match label.strip_suffix("+cd") {
        Some(n) => (n, true),
        None => (label, false),
    };
    let system = System::parse(name)?;
    if cd && !system.has_experts() {
        return Err(Error::Config(format!("{label}: disentanglement needs two experts")));
    }
    Ok((system, cd))
}

pub fn label(system: System, disentangle: bool) -> String {
    if disentangle && system.has_experts() {
        format!("{system}+cd")
    } else {
        system.to_string()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be >= 1");
        }
        if self.checkpoint_average_k == 0 {
            return bad("checkpoint_average_k must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("peak_lr, clip_norm and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be >= 1");
        }
        for l in &self.matrix_systems {
            parse_label(l)?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        label(self.system, self.disentangle)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            disentangle: self.disentangle && self.system.has_experts(),
        }
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            d_model: self.d_model,
            ff_dim: self.ff_dim,
            n_heads: self.n_heads,
            n_shared_blocks: self.n_shared_blocks,
            n_specific_blocks: self.n_specific_blocks,
            vocab_size,
            system: self.system,
            disentangle: self.disentangle && self.system.has_experts(),
        }
    }

    /// Parses `key = value` lines over the defaults; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let mut c = TrainConfig::default();
        kv.take("epochs", &mut c.epochs)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("peak_lr", &mut c.peak_lr)?;
        kv.take("warmup_steps", &mut c.warmup_steps)?;
        kv.take("beta1", &mut c.beta1)?;
        kv.take("beta2", &mut c.beta2)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("clip_norm", &mut c.clip_norm)?;
        kv.take("checkpoint_average_k", &mut c.checkpoint_average_k)?;
        kv.take("seed", &mut c.seed)?;
        if let Some(s) = kv.take_raw("system") {
            c.system = System::parse(&s)?;
        }
        kv.take("disentangle", &mut c.disentangle)?;
        kv.take("lambda", &mut c.lambda)?;
        kv.take("d_model", &mut c.d_model)?;
        kv.take("ff_dim", &mut c.ff_dim)?;
        kv.take("n_heads", &mut c.n_heads)?;
        kv.take("n_shared_blocks", &mut c.n_shared_blocks)?;
        kv.take("n_specific_blocks", &mut c.n_specific_blocks)?;
        kv.take("beam_width", &mut c.beam_width)?;
        if let Some(s) = kv.take_raw("matrix_systems") {
            c.matrix_systems = s
                .split(',')
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "epochs = {}\nbatch_size = {}\npeak_lr = {}\nwarmup_steps = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nclip_norm = {}\ncheckpoint_average_k = {}\nseed = {}\nsystem = {}\ndisentangle = {}\nlambda = {}\nd_model = {}\nff_dim = {}\nn_heads = {}\nn_shared_blocks = {}\nn_specific_blocks = {}\nbeam_width = {}\nmatrix_systems = {}\n",
            self.epochs,
            self.batch_size,
            self.peak_lr,
            self.warmup_steps,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.clip_norm,
            self.checkpoint_average_k,
            self.seed,
            self.system,
            self.disentangle,
            self.lambda,
            self.d_model,
            self.ff_dim,
            self.n_heads,
            self.n_shared_blocks,
            self.n_specific_blocks,
            self.beam_width,
            self.matrix_systems.join(",")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_and_errors() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        let c = TrainConfig::from_kv("system = concat_lae\nepochs = 2 # short\nmatrix_systems = moe_lae, baseline_single").unwrap();
        assert_eq!((c.system, c.epochs), (System::ConcatLae, 2));
        assert_eq!(c.matrix_systems, vec!["moe_lae", "baseline_single"]);
        assert!(TrainConfig::from_kv("learning_rate = 1").is_err());
        assert!(TrainConfig::from_kv("warmup_steps = 0").is_err());
        assert!(TrainConfig::from_kv("checkpoint_average_k = 0").is_err());
        assert!(TrainConfig::from_kv("lambda = -1").is_err());
        assert!(TrainConfig::from_kv("matrix_systems = baseline_single+cd").is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(parse_label("moe_lae+cd").unwrap(), (System::MoeLae, true));
        assert_eq!(parse_label("concat_lae").unwrap(), (System::ConcatLae, false));
        assert_eq!(label(System::BaselineSingle, true), "baseline_single");
        for l in MATRIX_LABELS {
            let (s, cd) = parse_label(l).unwrap();
            assert_eq!(label(s, cd), l);
        }
    }
}
