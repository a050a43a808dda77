//! Optimisation loop, checkpoint handling and the system comparison matrix.
//!
//! Each utterance is run on its own graph; gradients are reduced in batch
//! order so a run is bit-reproducible for a fixed config and seed.

mod checkpoint;
mod config;
mod matrix;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{average_checkpoints, Checkpoint};
pub use config::{label, parse_label, TrainConfig, MATRIX_LABELS};
pub use matrix::{
    beam_label, evaluate_model, run_experiment_matrix, write_reports, EvalReport, MatrixReport, SystemRun, DEV_SPLITS,
};
pub use optim::{adam_step, clip_global_norm, global_norm, lr_schedule, AdamHyper, AdamState};

use crate::corpus::{Corpus, DatasetSplit};
use crate::encoder::{encode, project_to_logits, Graph, Head, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::objective::{
    disentangle_node, language_loss, mixture_loss, LossBreakdown, ObjectiveConfig, TokenSequence, Vocabulary,
};
use crate::tensorcore::{NodeId, Tensor};

pub const TRAIN_SPLIT: &str = "train";
pub const VALID_SPLIT: &str = "valid";

/// The scalar training objective of one utterance recorded on `g`.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Forward pass through every head the system has. `None` when some target
/// cannot be aligned in the available frames.
pub fn utterance_loss(
    g: &mut Graph,
    x: &Tensor,
    y: &TokenSequence,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
) -> Result<Option<UtteranceLoss>> {
    let enc = encode(g, x, cfg)?;
    let Some(l_mix) = mixture_loss(g, &enc.fused, y, cfg)? else {
        return Ok(None);
    };
    let Some((h_a, h_b)) = enc.experts else {
        let v = g.value(l_mix).item();
        return Ok(Some(UtteranceLoss {
            total: l_mix,
            breakdown: LossBreakdown::single(v),
        }));
    };
    let Some(lang) = language_loss(g, &h_a, &h_b, y, vocab, cfg)? else {
        return Ok(None);
    };
    let sum = g.tape.add(l_mix, lang.l_lang)?;
    let mut total = g.tape.scale(sum, 0.5)?;
    let mut l_cd = 0.0;
    if obj.disentangle {
        let (cd, _) = disentangle_node(&mut g.tape, h_a.node, h_b.node)?;
        l_cd = g.value(cd).item();
        let weighted = g.tape.scale(cd, obj.lambda)?;
        total = g.tape.add(total, weighted)?;
    }
    let v = |g: &Graph, n: NodeId| g.value(n).item();
    let breakdown = LossBreakdown::language_aware(v(g, lang.l_a), v(g, lang.l_b), v(g, l_mix), l_cd, obj);
    Ok(Some(UtteranceLoss { total, breakdown }))
}

/// Mean of per-utterance breakdowns, recombined so the stored total obeys
/// the objective identities exactly.
fn mean_breakdown(parts: &[LossBreakdown], cfg: &ModelConfig, obj: &ObjectiveConfig) -> LossBreakdown {
    let n = parts.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    if cfg.system.has_experts() {
        LossBreakdown::language_aware(mean(|b| b.l_a), mean(|b| b.l_b), mean(|b| b.l_mix), mean(|b| b.l_cd), obj)
    } else {
        LossBreakdown::single(mean(|b| b.l_mix))
    }
}

pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    /// Utterances that contributed.
    pub used: usize,
}

/// Batch loss and parameter gradients averaged over the feasible utterances.
/// `None` when no utterance of the batch could be aligned.
pub fn batch_gradients(
    params: &Parameters,
    batch: &[(&Tensor, &TokenSequence)],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
) -> Result<Option<BatchGradients>> {
    let mut acc: BTreeMap<String, Tensor> = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
    let mut parts = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let mut g = Graph::new(params);
        let Some(loss) = utterance_loss(&mut g, x, y, vocab, cfg, obj)? else {
            continue;
        };
        let grads = g.tape.backward(loss.total)?;
        for (name, gt) in g.param_gradients(&grads) {
            let a = acc.get_mut(&name).expect("same parameter set");
            for (s, v) in a.data_mut().iter_mut().zip(gt.data()) {
                *s += v;
            }
        }
        parts.push(loss.breakdown);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let inv = 1.0 / parts.len() as f64;
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Some(BatchGradients {
        loss: mean_breakdown(&parts, cfg, obj),
        grads: acc,
        used: parts.len(),
    }))
}

/// Mean total loss over the feasible utterances of a split, without gradients.
pub fn evaluate_loss(
    params: &Parameters,
    split: &DatasetSplit,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for u in &split.utterances {
        let mut g = Graph::new(params);
        if let Some(l) = utterance_loss(&mut g, &u.features, &u.reference, vocab, cfg, obj)? {
            sum += l.breakdown.l_total;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Frame-level log-probabilities of the mixture head.
pub fn mix_log_probs(params: &Parameters, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let enc = encode(&mut g, x, cfg)?;
    let logits = project_to_logits(&mut g, &enc.fused, Head::Mix, cfg)?;
    let lp = g.tape.log_softmax_last_dim(logits)?;
    Ok(g.value(lp).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    /// Tab-separated `step lr l_a l_b l_lang l_mix l_cd l_total`.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, l.l_a, l.l_b, l.l_lang, l.l_mix, l.l_cd, l.l_total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch total loss over the epoch's steps.
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model_config: ModelConfig,
    /// The initial parameters followed by one checkpoint per epoch.
    pub checkpoints: Vec<Checkpoint>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Utterances skipped because a target could not be aligned.
    pub skipped: usize,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.steps.iter().map(|s| s.to_line() + "\n").collect()
    }
}

/// Trains the system described by `cfg` on the `train` split, scoring the
/// `valid` split after every epoch. Step lines go to `log` as they happen.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_split = corpus.split(TRAIN_SPLIT)?;
    let valid_split = corpus.split(VALID_SPLIT)?;
    let feature_dim = corpus
        .feature_dim()
        .ok_or_else(|| Error::Config("corpus has no utterances".into()))?;
    let model_cfg = cfg.model_config(feature_dim, corpus.vocab.len());
    model_cfg.validate()?;
    let obj = cfg.objective();
    let vocab = &corpus.vocab;
    for u in train_split.utterances.iter().chain(&valid_split.utterances) {
        u.reference.validate(vocab)?;
        if u.features.last_dim() != feature_dim {
            return Err(Error::shape(
                "train",
                format!("{}: feature width {} vs {feature_dim}", u.id, u.features.last_dim()),
            ));
        }
    }

    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let mut params = Parameters::init(&model_cfg, cfg.seed)?;
    let mut state = AdamState::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let v0 = evaluate_loss(&params, valid_split, vocab, &model_cfg, &obj)?;
    let mut checkpoints = vec![Checkpoint::new(params.clone(), 0, v0, &model_cfg)];
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_split.utterances.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor, &TokenSequence)> = chunk
                .iter()
                .map(|&i| {
                    let u = &train_split.utterances[i];
                    (&u.features, &u.reference)
                })
                .collect();
            let result = batch_gradients(&params, &batch, vocab, &model_cfg, &obj).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    step: step + 1,
                    detail: format!("non-finite value in {op}, batch {chunk:?}"),
                },
                e => e,
            })?;
            let Some(BatchGradients { loss, mut grads, used }) = result else {
                warn!("epoch {epoch}: batch of {} utterances had no alignable target", chunk.len());
                skipped += chunk.len();
                continue;
            };
            if used < chunk.len() {
                warn!("epoch {epoch}: skipped {} utterances too short for their target", chunk.len() - used);
                skipped += chunk.len() - used;
            }
            step += 1;
            let norm = global_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("breakdown {loss:?}, gradient norm {norm}, batch {chunk:?}"),
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_schedule(step as usize, cfg.peak_lr, cfg.warmup_steps);
            adam_step(&mut params, &grads, &mut state, lr, &hyper)?;
            let rec = StepRecord { step, lr, loss };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.to_line()).map_err(|e| Error::io("<training log>", e))?;
            }
            steps.push(rec);
            epoch_sum += loss.l_total;
            epoch_steps += 1;
        }
        let valid_loss = evaluate_loss(&params, valid_split, vocab, &model_cfg, &obj)?;
        let train_loss = epoch_sum / epoch_steps.max(1) as f64;
        info!("{} epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4}", cfg.label());
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        checkpoints.push(Checkpoint::new(params.clone(), step, valid_loss, &model_cfg));
    }
    Ok(TrainOutcome {
        model_config: model_cfg,
        checkpoints,
        steps,
        epochs,
        skipped,
    })
}
