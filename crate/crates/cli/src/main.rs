//! Operator surface for the fusion pipeline: data generation, training,
//! instruction-conditioned inference, metric evaluation, and judging.
//!
//! Exit codes: 0 ok, 2 config/parse error, 3 i/o error, 4 numeric failure.

mod config;
mod http_judge;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Config;
use ditfuse_core::flow::{fuse_images, FlowError};
use ditfuse_core::imaging::{ImageBuf, MaskBuf};
use ditfuse_core::judge::{aggregate_ratios, judge_csv, judge_many, JudgeItem, StubBackend};
use ditfuse_core::m3::generate_dataset;
use ditfuse_core::metrics::{eval_csv, eval_row};
use ditfuse_core::prompt::{parse_prompt, CANONICAL_IMAGE_BLOCK};
use ditfuse_core::train::{
    load_checkpoint, run_training_jobs, save_checkpoint, TrainError, TrainerState,
};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(_) | TrainError::Imaging(_) => CliError::Io(e.to_string()),
            TrainError::EmptyManifest | TrainError::Prompt(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match &e {
            FlowError::NonFiniteState { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ditfuse",
    about = "Instruction-driven diffusion-transformer image fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendKind {
    Stub,
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Template {
    Base,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the training dataset: degraded pairs, targets, manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of source PNG images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (or resume) on a generated manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss log CSV (step,loss,lr).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Instruction-conditioned fusion of two images.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Prompt string; must carry both image placeholders unless
        /// --template base wraps it.
        #[arg(long)]
        prompt: String,
        /// Inject the canonical skeleton around a bare instruction.
        #[arg(long, value_enum)]
        template: Option<Template>,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical fusion metrics over aligned directories.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        src_a: PathBuf,
        #[arg(long)]
        src_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-question judge protocol over a pairs directory.
    Judge {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Stub)]
        backend: BackendKind,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        jobs: usize,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            config,
            images,
            out,
            seed,
        } => cmd_gen_data(config.as_deref(), &images, &out, seed),
        Command::Train {
            config,
            manifest,
            out,
            resume,
            log,
            jobs,
        } => cmd_train(
            config.as_deref(),
            &manifest,
            &out,
            resume.as_deref(),
            log.as_deref(),
            jobs,
        ),
        Command::Fuse {
            ckpt,
            image_a,
            image_b,
            prompt,
            template,
            steps,
            guidance,
            seed,
            out,
        } => cmd_fuse(
            &ckpt, &image_a, &image_b, &prompt, template, steps, guidance, seed, &out,
        ),
        Command::Eval {
            fused,
            src_a,
            src_b,
            out,
        } => cmd_eval(&fused, &src_a, &src_b, &out),
        Command::Judge {
            pairs,
            backend,
            endpoint,
            out,
            jobs,
        } => cmd_judge(&pairs, backend, endpoint.as_deref(), &out, jobs),
    }
}

fn load_sources(dir: &Path) -> Result<Vec<(String, ImageBuf)>, CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{dir:?}: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("img")
            .to_string();
        let img = ImageBuf::load_png(&path).map_err(|e| CliError::Io(e.to_string()))?;
        out.push((name, img));
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("no PNG images under {dir:?}")));
    }
    Ok(out)
}

fn cmd_gen_data(
    config: Option<&Path>,
    images: &Path,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let config = Config::load(config)?;
    config.announce();
    let sources = load_sources(images)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{out:?}: {e}")))?;
    let manifest =
        generate_dataset(&sources, &config.data, &config.degrade, seed, out).map_err(|e| {
            match &e {
                ditfuse_core::m3::M3Error::Io(_) => CliError::Io(e.to_string()),
                _ => CliError::Config(e.to_string()),
            }
        })?;
    eprintln!(
        "wrote {} records ({:?}) under {:?}",
        manifest.len(),
        manifest.counts,
        out
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    manifest_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
    jobs: usize,
) -> Result<(), CliError> {
    let config = Config::load(config)?;
    config.announce();
    let manifest = ditfuse_core::m3::Manifest::load(manifest_path).map_err(|e| match &e {
        ditfuse_core::m3::M3Error::Io(_) => CliError::Io(e.to_string()),
        _ => CliError::Config(e.to_string()),
    })?;
    let data_root = manifest_path.parent().unwrap_or(Path::new("."));

    let mut state: TrainerState<f32> = match resume {
        Some(path) => load_checkpoint(path)?,
        None => TrainerState::new(&config.model, &config.train)?,
    };

    let mut log_file = match log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| CliError::Io(format!("{p:?}: {e}")))?,
        ),
        None => None,
    };
    let rows = run_training_jobs(
        &mut state,
        &manifest,
        data_root,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
        jobs,
    )?;
    save_checkpoint(&state, out)?;
    if let Some((step, loss, _)) = rows.last() {
        eprintln!("finished at step {step}, loss {loss:.6}; checkpoint {out:?}");
    } else {
        eprintln!("nothing to do (already at target step); checkpoint {out:?}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuse(
    ckpt: &Path,
    image_a: &Path,
    image_b: &Path,
    prompt: &str,
    template: Option<Template>,
    steps: usize,
    guidance: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let prompt = match template {
        Some(Template::Base) => format!("[FUSION] {CANONICAL_IMAGE_BLOCK} {}", prompt.trim()),
        None => prompt.to_string(),
    };
    parse_prompt(&prompt).map_err(|e| CliError::Config(e.to_string()))?;

    let state: TrainerState<f32> = load_checkpoint(ckpt)?;
    let img_a = ImageBuf::load_png(image_a).map_err(|e| CliError::Io(e.to_string()))?;
    let img_b = ImageBuf::load_png(image_b).map_err(|e| CliError::Io(e.to_string()))?;
    let fused = fuse_images(&state.params, &prompt, &img_a, &img_b, steps, guidance, seed)?;
    fused
        .save_png(out)
        .map_err(|e| CliError::Io(e.to_string()))?;
    eprintln!("wrote {out:?}");
    Ok(())
}

fn png_ids(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{dir:?}: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

fn cmd_eval(fused: &Path, src_a: &Path, src_b: &Path, out: &Path) -> Result<(), CliError> {
    let ids = png_ids(fused)?;
    if ids.is_empty() {
        return Err(CliError::Io(format!("no fused images under {fused:?}")));
    }
    let mut rows = Vec::new();
    for id in &ids {
        let f = ImageBuf::load_png(&fused.join(format!("{id}.png")))
            .map_err(|e| CliError::Io(e.to_string()))?;
        let a = ImageBuf::load_png(&src_a.join(format!("{id}.png")))
            .map_err(|e| CliError::Io(e.to_string()))?;
        let b = ImageBuf::load_png(&src_b.join(format!("{id}.png")))
            .map_err(|e| CliError::Io(e.to_string()))?;
        rows.push(eval_row(id, &f, &a, &b).map_err(|e| CliError::Config(e.to_string()))?);
    }
    std::fs::write(out, eval_csv(&rows)).map_err(|e| CliError::Io(format!("{out:?}: {e}")))?;
    eprintln!("wrote {} rows to {out:?}", rows.len());
    Ok(())
}

fn cmd_judge(
    pairs: &Path,
    backend: BackendKind,
    endpoint: Option<&str>,
    out: &Path,
    jobs: usize,
) -> Result<(), CliError> {
    let entries = std::fs::read_dir(pairs).map_err(|e| CliError::Io(format!("{pairs:?}: {e}")))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            p.file_name()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_suffix("_fused.png"))
                .map(String::from)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Io(format!("no *_fused.png under {pairs:?}")));
    }

    let mut items = Vec::new();
    let mut gts = Vec::new();
    for id in &ids {
        let fused = ImageBuf::load_png(&pairs.join(format!("{id}_fused.png")))
            .map_err(|e| CliError::Io(e.to_string()))?;
        let segmented = ImageBuf::load_png(&pairs.join(format!("{id}_seg.png")))
            .map_err(|e| CliError::Io(e.to_string()))?;
        let label_path = pairs.join(format!("{id}_label.txt"));
        let label = match std::fs::read_to_string(&label_path) {
            Ok(text) => text.trim().to_string(),
            Err(_) => "region".to_string(),
        };
        if matches!(backend, BackendKind::Stub) {
            let gt = MaskBuf::load_png(&pairs.join(format!("{id}_gt.png")))
                .map_err(|e| CliError::Io(e.to_string()))?;
            gts.push(gt);
        }
        items.push(JudgeItem {
            id: id.clone(),
            label,
            fused,
            segmented,
        });
    }

    let verdicts = match backend {
        BackendKind::Stub => {
            // one oracle per sample, each carrying that sample's ground truth
            let mut all = Vec::new();
            for (item, gt) in items.iter().zip(gts) {
                let be = StubBackend { gt };
                let mut v = judge_many(&be, std::slice::from_ref(item), 1)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                all.append(&mut v);
            }
            all
        }
        BackendKind::Http => {
            let endpoint = endpoint.ok_or_else(|| {
                CliError::Config("--backend http requires --endpoint".to_string())
            })?;
            let token = std::env::var("DITFUSE_JUDGE_TOKEN").ok();
            let be = http_judge::HttpBackend::new(endpoint, token);
            judge_many(&be, &items, jobs).map_err(|e| CliError::Io(e.to_string()))?
        }
    };

    let report = aggregate_ratios(&verdicts).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out, judge_csv(&verdicts, &report))
        .map_err(|e| CliError::Io(format!("{out:?}: {e}")))?;
    eprintln!(
        "judged {} samples: P {:.3} R {:.3} I {:.3}",
        report.n, report.p_ratio, report.r_ratio, report.i_ratio
    );
    Ok(())
}
