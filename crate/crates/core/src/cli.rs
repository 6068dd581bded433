//! `techdetect` command-line front end.
//!
//! Every command merges an optional `--config` file with its flags (flags win),
//! echoes the effective settings to a run log, and exits with 0 on success,
//! 1 on input or usage errors, 2 on numerical failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::annotation::EventAnnotation;
use crate::audio::read_wav;
use crate::config::RunConfig;
use crate::detector::{decode_events, detect_variable_with_hop, Detector, DEFAULT_HOP_SECONDS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, evaluate_oracle};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{train_from_manifests, FcnConfig};
use crate::synth::{build_dataset_with, load_clip_library};
use crate::viz::{write_event_roll, DEFAULT_PX_PER_SECOND};
use crate::vocab::TechniqueVocabulary;
use crate::{CROSSFADE_SECONDS, SEGMENT_SECONDS};

#[derive(Debug, Parser)]
#[command(name = "techdetect", version, about = "Instrument playing-technique detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path (directory for `synth`, file otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default 1).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize labeled 10 s segments from a clip library.
    Synth {
        #[command(flatten)]
        common: Common,
        /// CSV manifest with `path,label` rows.
        #[arg(long)]
        clips: Option<PathBuf>,
        /// Vocabulary file, one label per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Number of segments.
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        crossfade: Option<f64>,
    },
    /// Train the frame classifier on a synthesized dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset manifest (or its directory).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation dataset manifest (or its directory).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Four comma-separated conv widths, e.g. `16,32,64,64`.
        #[arg(long)]
        widths: Option<String>,
        #[arg(long)]
        deconv_kernel: Option<usize>,
        #[arg(long)]
        deconv_stride: Option<usize>,
    },
    /// Detect techniques in a recording of any length.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
        /// 44.1 kHz WAV file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Hop between windows in seconds.
        #[arg(long)]
        hop: Option<f64>,
        /// Also write frame posteriors (PRED binary) to this path.
        #[arg(long)]
        dump_posteriors: Option<PathBuf>,
    },
    /// Score a checkpoint on a synthesized test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset manifest (or its directory).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score the reference labels against themselves instead of running a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Render reference and predicted events as an SVG event roll.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        predicted: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Timeline length in seconds (default: last event offset).
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        px_per_second: Option<f64>,
    },
}

fn base_config(name: &str, common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(),
    };
    cfg.set("command", name);
    cfg.set_opt("seed", common.seed);
    cfg.set_opt("out", common.out.as_ref().map(|p| p.display().to_string()));
    cfg.set_opt("threads", common.threads);
    Ok(cfg)
}

fn path_of(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.require::<String>(key).map(PathBuf::from)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_log(path: &Path, cfg: &RunConfig, extra: &str) -> Result<()> {
    let text = format!("# effective configuration\n{cfg}# output\n{extra}");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Merges flags over the config file for the chosen command.
pub fn effective_config(command: &Command) -> Result<RunConfig> {
    let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    Ok(match command {
        Command::Synth { common, clips, vocab, n, duration, crossfade } => {
            let mut c = base_config("synth", common)?;
            c.set_opt("clips", opt_path(clips));
            c.set_opt("vocab", opt_path(vocab));
            c.set_opt("n", *n);
            c.set_opt("duration", *duration);
            c.set_opt("crossfade", *crossfade);
            c
        }
        Command::Train {
            common,
            train,
            val,
            k,
            epochs,
            lr,
            batch_size,
            widths,
            deconv_kernel,
            deconv_stride,
        } => {
            let mut c = base_config("train", common)?;
            c.set_opt("train", opt_path(train));
            c.set_opt("val", opt_path(val));
            c.set_opt("k", *k);
            c.set_opt("epochs", *epochs);
            c.set_opt("lr", *lr);
            c.set_opt("batch-size", *batch_size);
            c.set_opt("widths", widths.clone());
            c.set_opt("deconv-kernel", *deconv_kernel);
            c.set_opt("deconv-stride", *deconv_stride);
            c
        }
        Command::Detect { common, model, input, hop, dump_posteriors } => {
            let mut c = base_config("detect", common)?;
            c.set_opt("model", opt_path(model));
            c.set_opt("input", opt_path(input));
            c.set_opt("hop", *hop);
            c.set_opt("dump-posteriors", opt_path(dump_posteriors));
            c
        }
        Command::Eval { common, model, manifest, oracle } => {
            let mut c = base_config("eval", common)?;
            c.set_opt("model", opt_path(model));
            c.set_opt("manifest", opt_path(manifest));
            if *oracle {
                c.set("oracle", "true");
            }
            c
        }
        Command::Viz { common, reference, predicted, vocab, duration, px_per_second } => {
            let mut c = base_config("viz", common)?;
            c.set_opt("reference", opt_path(reference));
            c.set_opt("predicted", opt_path(predicted));
            c.set_opt("vocab", opt_path(vocab));
            c.set_opt("duration", *duration);
            c.set_opt("px-per-second", *px_per_second);
            c
        }
    })
}

fn parse_widths(s: &str) -> Result<[usize; 4]> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("widths: cannot parse {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("widths: need exactly four values, got {s:?}")))
}

/// Model config from run settings; `k` defaults to `vocab_len`.
pub fn model_config(cfg: &RunConfig, vocab_len: usize) -> Result<FcnConfig> {
    let mut c = FcnConfig::reference(cfg.get_or("k", vocab_len)?);
    if let Some(w) = cfg.get_str("widths") {
        c.widths = parse_widths(w)?;
    }
    c.deconv_kernel = cfg.get_or("deconv-kernel", c.deconv_kernel)?;
    c.deconv_stride = cfg.get_or("deconv-stride", c.deconv_stride)?;
    c.learning_rate = cfg.get_or("lr", c.learning_rate)?;
    c.epochs = cfg.get_or("epochs", c.epochs)?;
    c.batch_size = cfg.get_or("batch-size", c.batch_size)?;
    c.seed = cfg.get_or("seed", c.seed)?;
    if c.k != vocab_len {
        return Err(Error::Config(format!(
            "k = {} does not match the {vocab_len}-class dataset vocabulary",
            c.k
        )));
    }
    c.validate()?;
    Ok(c)
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let vocab = TechniqueVocabulary::load(path_of(cfg, "vocab")?)?;
    let library = load_clip_library(path_of(cfg, "clips")?, vocab)?;
    let out = path_of(cfg, "out")?;
    let manifest = build_dataset_with(
        &library,
        cfg.require("n")?,
        cfg.get_or("seed", 0)?,
        cfg.get_or("duration", SEGMENT_SECONDS)?,
        cfg.get_or("crossfade", CROSSFADE_SECONDS)?,
        &out,
    )?;
    let summary = format!(
        "wrote {} segments from {} clips to {}\n",
        manifest.len(),
        library.len(),
        out.display()
    );
    write_log(&out.join("run.log"), cfg, &summary)?;
    Ok(summary)
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let train_path = path_of(cfg, "train")?;
    let out = path_of(cfg, "out")?;
    let vocab_len = crate::synth::DatasetManifest::load(&train_path)?.vocabulary.len();
    let config = model_config(cfg, vocab_len)?;
    let val = cfg.get::<String>("val")?.map(PathBuf::from);

    let mut log = String::new();
    let epochs = config.epochs;
    let (params, history) = train_from_manifests(&config, &train_path, val.as_deref(), |r| {
        let line = format!(
            "epoch {}/{epochs} loss {:.6} train_acc {:.4} val_acc {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        println!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    save_checkpoint(&params, &out)?;
    let _ = writeln!(log, "best epoch {}", history.best_epoch);
    let _ = writeln!(log, "history {}", serde_json::to_string(&history)?);
    write_log(&sibling(&out, ".log"), cfg, &log)?;
    Ok(format!("saved checkpoint {} (best epoch {})\n", out.display(), history.best_epoch))
}

fn cmd_detect(cfg: &RunConfig) -> Result<String> {
    let params = load_checkpoint(path_of(cfg, "model")?)?;
    let vocab = params
        .vocabulary
        .clone()
        .ok_or_else(|| Error::Format("checkpoint carries no vocabulary".into()))?;
    let clip = read_wav(path_of(cfg, "input")?)?;
    let out = path_of(cfg, "out")?;
    let detector = Detector::new(params)?;
    let pred = detect_variable_with_hop(&detector, &clip, cfg.get_or("hop", DEFAULT_HOP_SECONDS)?)?;
    let events = decode_events(&pred);
    events.write_jsonl(&out, &vocab)?;
    if let Some(dump) = cfg.get::<String>("dump-posteriors")? {
        let file = std::fs::File::create(&dump).map_err(|e| Error::io(&dump, e))?;
        pred.write_posteriors(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&dump, e))?;
    }
    let summary = format!(
        "{} frames, {} events written to {}\n",
        pred.n_frames(),
        events.len(),
        out.display()
    );
    write_log(&sibling(&out, ".log"), cfg, &summary)?;
    Ok(summary)
}

fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let manifest = crate::synth::DatasetManifest::load(path_of(cfg, "manifest")?)?;
    let out = path_of(cfg, "out")?;
    let report = if cfg.get_or("oracle", false)? {
        evaluate_oracle(&manifest)?
    } else {
        let detector = Detector::new(load_checkpoint(path_of(cfg, "model")?)?)?;
        evaluate_dataset(&detector, &manifest)?
    };
    let csv = out.with_extension("confusion.csv");
    report.save(&out, &csv)?;
    let summary = format!(
        "average accuracy {:.4} over {} segments ({} frames)\n",
        report.average_accuracy,
        report.segments.len(),
        report.total_frames
    );
    write_log(&sibling(&out, ".log"), cfg, &summary)?;
    Ok(summary)
}

fn cmd_viz(cfg: &RunConfig) -> Result<String> {
    let vocab = TechniqueVocabulary::load(path_of(cfg, "vocab")?)?;
    let reference = EventAnnotation::read_jsonl(path_of(cfg, "reference")?, &vocab)?;
    let predicted = match cfg.get::<String>("predicted")? {
        Some(p) => EventAnnotation::read_jsonl(p, &vocab)?,
        None => EventAnnotation::empty(),
    };
    let duration = cfg.get_or("duration", reference.end().max(predicted.end()))?;
    let out = path_of(cfg, "out")?;
    write_event_roll(
        &reference,
        &predicted,
        duration,
        &vocab,
        cfg.get_or("px-per-second", DEFAULT_PX_PER_SECOND)?,
        &out,
    )?;
    Ok(format!(
        "{} reference / {} predicted events drawn to {}\n",
        reference.len(),
        predicted.len(),
        out.display()
    ))
}

pub fn execute(command: &Command) -> Result<String> {
    let cfg = effective_config(command)?;
    let threads: usize = cfg.get_or("threads", 1)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Detect { .. } => cmd_detect(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Viz { .. } => cmd_viz(&cfg),
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("train.cfg");
        std::fs::write(&cfg_path, "epochs=30\nlr=0.01\nwidths=4,4,8,8\n").unwrap();
        let cli = Cli::try_parse_from([
            "techdetect",
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "9",
        ])
        .unwrap();
        let cfg = effective_config(&cli.command).unwrap();
        let model = model_config(&cfg, 4).unwrap();
        assert_eq!(model.epochs, 2);
        assert_eq!(model.learning_rate, 0.01);
        assert_eq!(model.widths, [4, 4, 8, 8]);
        assert_eq!(model.seed, 9);
        assert_eq!(model.k, 4);
    }

    #[test]
    fn k_mismatch_is_config_error() {
        let mut cfg = RunConfig::new();
        cfg.set("k", "7");
        assert!(matches!(model_config(&cfg, 4), Err(Error::Config(_))));
        cfg.set("k", "4");
        cfg.set("widths", "1,2,3");
        assert!(matches!(model_config(&cfg, 4), Err(Error::Config(_))));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["techdetect", "frobnicate"]), 1);
        assert_eq!(run(["techdetect", "synth", "--n", "3"]), 1);
    }
}
