use super::ctc::ctc_loss_node;
use super::lat::lat_mask;
use super::vocab::{Lang, TokenSequence, Vocabulary};
use crate::encoder::{project_to_logits, Graph, Head, HiddenSequence, ModelConfig};
use crate::error::Result;
use crate::tensorcore::NodeId;

/// Scalar nodes of the two language-aware CTC losses and their mean.
#[derive(Clone, Copy, Debug)]
pub struct LanguageLoss {
    pub l_a: NodeId,
    pub l_b: NodeId,
    pub l_lang: NodeId,
}

fn head_ctc(g: &mut Graph, h: &HiddenSequence, head: Head, target: &TokenSequence, cfg: &ModelConfig) -> Result<Option<NodeId>> {
    let logits = project_to_logits(g, h, head, cfg)?;
    let lp = g.tape.log_softmax_last_dim(logits)?;
    ctc_loss_node(&mut g.tape, lp, target.tokens())
}

/// Each expert's head scored against its masked target. `None` when either
/// target cannot be aligned in the available frames.
pub fn language_loss(
    g: &mut Graph,
    h_a: &HiddenSequence,
    h_b: &HiddenSequence,
    y: &TokenSequence,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Option<LanguageLoss>> {
    let y_a = lat_mask(y, Lang::A, vocab)?;
    let y_b = lat_mask(y, Lang::B, vocab)?;
    let Some(l_a) = head_ctc(g, h_a, Head::Lang(Lang::A), &y_a, cfg)? else {
        return Ok(None);
    };
    let Some(l_b) = head_ctc(g, h_b, Head::Lang(Lang::B), &y_b, cfg)? else {
        return Ok(None);
    };
    let sum = g.tape.add(l_a, l_b)?;
    let l_lang = g.tape.scale(sum, 0.5)?;
    Ok(Some(LanguageLoss { l_a, l_b, l_lang }))
}

/// CTC of the fused representation against the full code-switched target.
pub fn mixture_loss(g: &mut Graph, fused: &HiddenSequence, y: &TokenSequence, cfg: &ModelConfig) -> Result<Option<NodeId>> {
    head_ctc(g, fused, Head::Mix, y, cfg)
}
