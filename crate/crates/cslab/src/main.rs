use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cslab_core::corpus::{generate_corpus, read_corpus, write_corpus, SynthSpec};
use cslab_core::evalkit::write_score_csv;
use cslab_core::trainer::{
    average_checkpoints, evaluate_model, parse_label, run_experiment_matrix, train, write_reports, Checkpoint,
    EvalReport, TrainConfig, DEV_SPLITS,
};

/// Synthetic code-switching ASR lab: data generation, training and scoring.
#[derive(Parser)]
#[command(name = "cslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        /// `key = value` corpus spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one system and save its checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split with a saved model and print its score rows as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long, default_value_t = 10)]
        beam: usize,
    },
    /// Train and evaluate every system of the comparison matrix.
    Matrix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the CSV reports of a matrix run from its saved models.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Corpus directory; defaults to the one recorded by the run.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

const RUN_CONFIG: &str = "config.txt";
const RUN_DATA: &str = "data.txt";

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_kv(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn gen(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SynthSpec::from_kv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    let corpus = generate_corpus(&spec)?;
    write_corpus(out, &corpus)?;
    fs::write(out.join("spec.txt"), spec.to_kv())?;
    for s in &corpus.splits {
        println!(
            "{}\t{} utterances\tratio_a {:.3}\tswitches/token {:.3}",
            s.name,
            s.utterances.len(),
            s.realized_ratio(&corpus.vocab),
            s.switches_per_token()
        );
    }
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = read_corpus(data)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join(RUN_CONFIG), cfg.to_kv())?;
    let mut log = BufWriter::new(File::create(out.join("train_log.tsv"))?);
    let outcome = train(&cfg, &corpus, Some(&mut log))?;
    log.flush()?;
    let mut epochs = BufWriter::new(File::create(out.join("epochs.tsv"))?);
    for e in &outcome.epochs {
        writeln!(epochs, "{}\t{:.6}\t{:.6}", e.epoch, e.train_loss, e.valid_loss)?;
    }
    epochs.flush()?;
    for (i, c) in outcome.checkpoints.iter().enumerate() {
        c.save(&ckpt_dir.join(format!("epoch_{i:03}.ckpt")))?;
    }
    let candidates = if outcome.checkpoints.len() > 1 {
        &outcome.checkpoints[1..]
    } else {
        &outcome.checkpoints[..]
    };
    let k = cfg.checkpoint_average_k.min(candidates.len());
    let model = average_checkpoints(candidates, k)?;
    model.save(&out.join("model.ckpt"))?;
    info!("averaged {k} checkpoints into {}", out.join("model.ckpt").display());
    Ok(())
}

fn eval(model: &Path, data: &Path, split: &str, beam: usize) -> Result<()> {
    if beam == 0 {
        bail!("--beam must be at least 1");
    }
    let ckpt = Checkpoint::load(model, None)?;
    let cfg = ckpt.model_config()?;
    let corpus = read_corpus(data)?;
    let label = cslab_core::trainer::label(cfg.system, cfg.disentangle);
    let report = evaluate_model(&ckpt.params, &cfg, &corpus, &label, 0, beam, &[split])?;
    write_score_csv(io::stdout().lock(), &report.scores)?;
    Ok(())
}

fn matrix(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = read_corpus(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_CONFIG), cfg.to_kv())?;
    let data_abs = fs::canonicalize(data)?;
    fs::write(out.join(RUN_DATA), format!("{}\n", data_abs.display()))?;
    let report = run_experiment_matrix(&cfg, &corpus, Some(out))?;
    for r in &report.eval.scores {
        println!(
            "{}\t{}\t{}\tMER {:.4}",
            r.key.system,
            r.key.split,
            r.decoder,
            r.report.mer()
        );
    }
    Ok(())
}

fn report(run: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(&run.join(RUN_CONFIG)))?;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(fs::read_to_string(run.join(RUN_DATA))?.trim_end()),
    };
    let corpus = read_corpus(&data)?;
    let splits: Vec<&str> = DEV_SPLITS.iter().copied().filter(|s| corpus.split(s).is_ok()).collect();
    let mut all = EvalReport::default();
    for l in &cfg.matrix_systems {
        let (system, cd) = parse_label(l)?;
        let label = cslab_core::trainer::label(system, cd);
        let path = run.join(&label).join("model.ckpt");
        let ckpt = Checkpoint::load(&path, None)?;
        let mc = ckpt.model_config()?;
        let e = evaluate_model(&ckpt.params, &mc, &corpus, &label, cfg.seed, cfg.beam_width, &splits)?;
        all.scores.extend(e.scores);
        all.gating.extend(e.gating);
        all.separation.extend(e.separation);
    }
    write_reports(run, &all)?;
    println!("wrote reports for {} systems to {}", cfg.matrix_systems.len(), run.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { spec, out } => gen(spec.as_deref(), &out),
        Command::Train { config, data, out } => train_cmd(config.as_deref(), &data, &out),
        Command::Eval {
            model,
            data,
            split,
            beam,
        } => eval(&model, &data, &split, beam),
        Command::Matrix { config, data, out } => matrix(config.as_deref(), &data, &out),
        Command::Report { run, data } => report(&run, data.as_deref()),
    }
}
