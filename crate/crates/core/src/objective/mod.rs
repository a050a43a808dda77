//! Training objective: CTC for the mixed and language-aware targets plus the
//! cosine disentanglement term between the two experts.

mod ctc;
mod disentangle;
mod language;
mod lat;
mod vocab;

pub use ctc::{ctc_loss, ctc_loss_node, ctc_oracle, min_alignment_frames, CtcOutput};
pub use disentangle::{cosine_distance, disentangle_loss, disentangle_node, DisentangleValue, ZERO_NORM};
pub use language::{language_loss, mixture_loss, LanguageLoss};
pub use lat::lat_mask;
pub use vocab::{Lang, Tag, TokenSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub disentangle: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            disentangle: true,
        }
    }
}

/// `0.5 * (l_mix + l_lang) + lambda * l_cd`; the last term is dropped when
/// disentanglement is off.
pub fn total_loss(l_mix: f64, l_lang: f64, l_cd: f64, cfg: &ObjectiveConfig) -> f64 {
    let base = 0.5 * (l_mix + l_lang);
    if cfg.disentangle {
        base + cfg.lambda * l_cd
    } else {
        base
    }
}

/// Batch-averaged loss components. For the single-stack baseline only
/// `l_mix` is trained and the other terms are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_b: f64,
    pub l_lang: f64,
    pub l_mix: f64,
    pub l_cd: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn language_aware(l_a: f64, l_b: f64, l_mix: f64, l_cd: f64, cfg: &ObjectiveConfig) -> Self {
        let l_lang = 0.5 * (l_a + l_b);
        let l_cd = if cfg.disentangle { l_cd } else { 0.0 };
        Self {
            l_a,
            l_b,
            l_lang,
            l_mix,
            l_cd,
            l_total: total_loss(l_mix, l_lang, l_cd, cfg),
        }
    }

    pub fn single(l_mix: f64) -> Self {
        Self {
            l_mix,
            l_total: l_mix,
            ..Self::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_a, self.l_b, self.l_lang, self.l_mix, self.l_cd, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}
