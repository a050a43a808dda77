use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};

use super::{average_checkpoints, label, mix_log_probs, parse_label, train, Checkpoint, TrainConfig, TrainOutcome};
use crate::corpus::Corpus;
use crate::decode::{greedy_decode, prefix_beam_decode};
use crate::encoder::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::evalkit::{
    analyze_split, compute_mer, gating_report, separation_stats, write_gating_csv, write_projection_csv,
    write_score_csv, write_separation_csv, GatingReport, RowKey, ScoreRow, SeparationReport,
};

pub const DEV_SPLITS: [&str; 2] = ["dev_A_heavy", "dev_B_heavy"];

/// Scores and expert analyses of one or more models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ScoreRow>,
    pub gating: Vec<(RowKey, GatingReport)>,
    pub separation: Vec<(RowKey, SeparationReport)>,
}

impl EvalReport {
    fn extend(&mut self, other: EvalReport) {
        self.scores.extend(other.scores);
        self.gating.extend(other.gating);
        self.separation.extend(other.separation);
    }

    pub fn mer(&self, system: &str, split: &str, decoder: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|r| r.key.system == system && r.key.split == split && r.decoder == decoder)
            .map(|r| r.report.mer())
    }

    pub fn gating_for(&self, system: &str, split: &str) -> Option<&GatingReport> {
        self.gating
            .iter()
            .find(|(k, _)| k.system == system && k.split == split)
            .map(|(_, g)| g)
    }

    pub fn separation_for(&self, system: &str, split: &str) -> Option<&SeparationReport> {
        self.separation
            .iter()
            .find(|(k, _)| k.system == system && k.split == split)
            .map(|(_, s)| s)
    }
}

pub fn beam_label(width: usize) -> String {
    format!("beam{width}")
}

/// Decodes `splits` greedily and with a `beam_width` prefix beam, scoring
/// the mask-free hypotheses. Systems with experts also get a separation
/// report per split, and MoE systems a gating report.
pub fn evaluate_model(
    params: &Parameters,
    cfg: &ModelConfig,
    corpus: &Corpus,
    system_label: &str,
    seed: u64,
    beam_width: usize,
    splits: &[&str],
) -> Result<EvalReport> {
    let vocab = &corpus.vocab;
    let mut out = EvalReport::default();
    for &name in splits {
        let split = corpus.split(name)?;
        let key = RowKey {
            system: system_label.to_string(),
            seed,
            split: name.to_string(),
        };
        let refs: Vec<_> = split.utterances.iter().map(|u| u.reference.clone()).collect();
        let mut greedy = Vec::with_capacity(refs.len());
        let mut beam = Vec::with_capacity(refs.len());
        for u in &split.utterances {
            let lp = mix_log_probs(params, cfg, &u.features)?;
            greedy.push(greedy_decode(&lp).without_masks(vocab));
            beam.push(prefix_beam_decode(&lp, beam_width).without_masks(vocab));
        }
        for (decoder, hyps) in [("greedy".to_string(), greedy), (beam_label(beam_width), beam)] {
            out.scores.push(ScoreRow {
                key: key.clone(),
                decoder,
                report: compute_mer(&refs, &hyps, vocab)?,
            });
        }
        if cfg.system.has_experts() {
            let an = analyze_split(params, cfg, split, vocab)?;
            if !an.g_a.is_empty() {
                out.gating.push((key.clone(), gating_report(&an)?));
            }
            out.separation.push((key, separation_stats(&an)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemRun {
    pub label: String,
    pub param_count: usize,
    pub outcome: TrainOutcome,
    /// The averaged checkpoint that was evaluated.
    pub model: Checkpoint,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixReport {
    pub runs: Vec<SystemRun>,
    pub eval: EvalReport,
}

impl MatrixReport {
    pub fn run(&self, label: &str) -> Option<&SystemRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

/// Candidates for averaging: the per-epoch checkpoints, or the initial one
/// when no epoch ran.
fn averaged(outcome: &TrainOutcome, k: usize) -> Result<Checkpoint> {
    let ckpts = match outcome.checkpoints.len() {
        0 | 1 => &outcome.checkpoints[..],
        _ => &outcome.checkpoints[1..],
    };
    let k_eff = k.min(ckpts.len()).max(1);
    if k_eff < k {
        warn!("averaging {k_eff} checkpoints instead of {k}: only {} available", ckpts.len());
    }
    average_checkpoints(ckpts, k_eff)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Trains every system of `base.matrix_systems` with the base seed, averages
/// its best checkpoints and evaluates the dev splits. With `out` set, each
/// system's training log, config and averaged model are written under
/// `out/<label>/` and the CSV reports into `out`.
pub fn run_experiment_matrix(base: &TrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<MatrixReport> {
    base.validate()?;
    let splits: Vec<&str> = DEV_SPLITS.iter().copied().filter(|s| corpus.split(s).is_ok()).collect();
    let mut report = MatrixReport::default();
    if base.matrix_systems.is_empty() {
        if let Some(dir) = out {
            write_reports(dir, &report.eval)?;
        }
        return Ok(report);
    }
    if splits.is_empty() {
        return Err(Error::Config(format!("corpus has none of the dev splits {DEV_SPLITS:?}")));
    }
    for l in &base.matrix_systems {
        let (system, disentangle) = parse_label(l)?;
        let mut cfg = base.clone();
        cfg.system = system;
        cfg.disentangle = disentangle;
        let name = label(system, disentangle);
        info!("training {name} (seed {})", cfg.seed);

        let outcome = match out {
            Some(dir) => {
                let sys_dir = dir.join(&name);
                fs::create_dir_all(&sys_dir).map_err(|e| Error::io(&sys_dir, e))?;
                let p = sys_dir.join("config.txt");
                fs::write(&p, cfg.to_kv()).map_err(|e| Error::io(&p, e))?;
                let p = sys_dir.join("train_log.tsv");
                let mut w = create(&p)?;
                let outcome = train(&cfg, corpus, Some(&mut w))?;
                w.flush().map_err(|e| Error::io(&p, e))?;
                outcome
            }
            None => train(&cfg, corpus, None)?,
        };
        let model = averaged(&outcome, cfg.checkpoint_average_k)?;
        if let Some(dir) = out {
            model.save(&dir.join(&name).join("model.ckpt"))?;
        }
        let eval = evaluate_model(
            &model.params,
            &outcome.model_config,
            corpus,
            &name,
            cfg.seed,
            cfg.beam_width,
            &splits,
        )?;
        report.eval.extend(eval);
        report.runs.push(SystemRun {
            label: name,
            param_count: model.params.count(),
            outcome,
            model,
        });
    }
    if let Some(dir) = out {
        write_reports(dir, &report.eval)?;
    }
    Ok(report)
}

/// Writes `score_report.csv`, `gating_report.csv`, `separation_report.csv`
/// and one `projection_points.csv` per system and split under `<system>/<split>/`.
pub fn write_reports(dir: &Path, eval: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |p: &Path, e: csv::Error| Error::io(p, std::io::Error::other(e));
    let p = dir.join("score_report.csv");
    write_score_csv(create(&p)?, &eval.scores).map_err(|e| csv_err(&p, e))?;
    let p = dir.join("gating_report.csv");
    write_gating_csv(create(&p)?, &eval.gating).map_err(|e| csv_err(&p, e))?;
    let p = dir.join("separation_report.csv");
    write_separation_csv(create(&p)?, &eval.separation).map_err(|e| csv_err(&p, e))?;
    for (key, sep) in &eval.separation {
        let Some(points) = &sep.points else { continue };
        let sub = dir.join(&key.system).join(&key.split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let p = sub.join("projection_points.csv");
        write_projection_csv(create(&p)?, points).map_err(|e| csv_err(&p, e))?;
    }
    Ok(())
}
