use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swe_core::forge::{self, Preset, Split, SplitPolicy};
use swe_core::io;
use swe_core::pipeline::{self, DenoiserInput, MetricTable, RunReport, Stage, TrainConfig, DEVICE_ENV};
use swe_core::recon::ReconMode;
use swe_core::{Error, Result};

#[derive(Parser)]
#[command(name = "forge", version, about = "Synthetic SWE data, two-stage training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms and write a dataset directory.
    Gen(GenArgs),
    /// Train the reconstruction network.
    TrainRecon(TrainArgs),
    /// Train the post-denoiser on cached or freshly computed Y′.
    TrainDenoiser(TrainArgs),
    /// Run the cascade on one sample.
    Infer(InferArgs),
    /// Run the cascade over a split and write metric tables and panels.
    Eval(EvalArgs),
    /// Summarize the reports found in a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    /// Input SNR in dB, or `inf` for clean motion.
    #[arg(long, default_value = "inf")]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    /// Put every sample in the training split.
    #[arg(long)]
    all_train: bool,
}

/// Every config key can be set here; flags win over the file.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ReconMode>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    recon_checkpoint: Option<PathBuf>,
    #[arg(long)]
    yprime_dir: Option<PathBuf>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_parser = parse_input)]
    denoiser_input: Option<DenoiserInput>,
    #[arg(long)]
    truth_noise_std: Option<f64>,
    #[arg(long, env = DEVICE_ENV)]
    device: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `*_report.json` files.
    run: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<ReconMode, String> {
    match s {
        "patch" => Ok(ReconMode::Patch),
        "full" => Ok(ReconMode::Full),
        _ => Err(format!("unknown mode {s:?} (patch|full)")),
    }
}

fn parse_input(s: &str) -> std::result::Result<DenoiserInput, String> {
    match s {
        "predicted" => Ok(DenoiserInput::Predicted),
        "truth-corrupted" => Ok(DenoiserInput::TruthCorrupted),
        _ => Err(format!("unknown denoiser input {s:?} (predicted|truth-corrupted)")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split {s:?} (train|val|test)"))
}

impl TrainArgs {
    fn resolve(self, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TrainConfig::from_toml(stage, &text, p)?
            }
            None => TrainConfig::for_stage(stage),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        apply!(data_dir, checkpoint_dir, mode, batch, lr, plateau_factor, patience, epochs, seed, base_channels);
        apply!(kappa, denoiser_input, truth_noise_std, device);
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.recon_checkpoint.is_some() {
            cfg.recon_checkpoint = self.recon_checkpoint;
        }
        if self.yprime_dir.is_some() {
            cfg.yprime_dir = self.yprime_dir;
        }
        cfg.validate()?;
        if cfg.device != "cpu" {
            log::warn!("device hint {:?} ignored; this build runs on the CPU", cfg.device);
        }
        Ok(cfg)
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let geom = a.preset.geometry();
    let policy = if a.all_train { SplitPolicy::AllTrain } else { SplitPolicy::Proportional };
    let metas = forge::plan_samples(&geom, a.n, a.snr, a.seed, policy);
    let samples = metas.iter().map(|m| forge::realize(&geom, m)).collect::<Result<Vec<_>>>()?;
    let manifest = io::write_dataset(&a.out, &geom, a.seed, &samples)?;
    for split in Split::ALL {
        println!("{:<5} {}", split.name(), manifest.split(split).count());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_report(r: &RunReport) {
    println!("stage {} fingerprint {:08x} wall-clock {:.1}s", r.stage, r.fingerprint, r.wall_clock_s);
    if r.untrained {
        println!("  weights are untrained");
    }
    if let Some(last) = r.log.epochs.last() {
        println!(
            "  {} epochs, {} steps, best monitor {:.6} at epoch {}, final lr {:.2e}",
            r.log.epochs.len(),
            last.steps,
            r.log.best_val,
            r.log.best_epoch,
            last.lr
        );
        for e in &r.log.epochs {
            let terms: Vec<String> = e.train.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
            println!("  epoch {:>4} lr {:.2e} monitor {:.6} {}", e.epoch, e.lr, e.val_loss, terms.join(" "));
        }
    }
    for t in &r.metrics {
        println!("  split {}\n{}", t.split, t.render());
    }
    for a in &r.artifacts {
        println!("  artifact {}", a.display());
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let manifest = io::read_manifest(&a.data_dir)?;
    let entry = manifest
        .samples
        .iter()
        .find(|e| e.meta.id == a.sample)
        .ok_or_else(|| Error::Config(format!("sample {:?} not in {}", a.sample, a.data_dir.display())))?;
    let sample = io::read_sample(&a.data_dir, &manifest, entry)?;
    let recon = pipeline::load_recon(&a.recon)?;
    pipeline::check_recon_geometry(&recon, &manifest.geometry)?;
    let denoiser = pipeline::load_denoiser(&a.denoiser)?;
    if pipeline::untrained(&recon, &denoiser)? {
        log::warn!("at least one network holds untrained weights; metrics are not meaningful");
    }
    let inf = pipeline::infer(&recon, &denoiser, &sample, &manifest.geometry)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, t) in [("yprime", &inf.y_prime), ("y", &inf.y), ("m", &inf.m)] {
        io::write_tensor(&a.out.join(format!("{}_{name}.swed", a.sample)), t)?;
    }
    pipeline::write_panel(&a.out.join(format!("{}.png", a.sample)), &sample.truth.modulus, &inf)?;
    let row = pipeline::score(&a.sample, &inf, &sample.truth)?;
    print!("{}", MetricTable::new("sample", vec![row]).render());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let start = std::time::Instant::now();
    let (manifest, samples) = io::read_dataset(&a.data_dir)?;
    let recon = pipeline::load_recon(&a.recon)?;
    let denoiser = pipeline::load_denoiser(&a.denoiser)?;
    let untrained = pipeline::untrained(&recon, &denoiser)?;
    if untrained {
        log::warn!("at least one network holds untrained weights; metrics are not meaningful");
    }
    let (table, artifacts) = pipeline::evaluate(&recon, &denoiser, &samples, &manifest.geometry, a.split, &a.out)?;
    print!("{}", table.render());
    let report = RunReport {
        stage: "eval".into(),
        fingerprint: io::fingerprint(&format!("{}{}", recon.config.to_json(), denoiser.config.to_json())),
        config: format!("{{\"recon\":{},\"denoiser\":{}}}", recon.config.to_json(), denoiser.config.to_json()),
        train_config: None,
        log: Default::default(),
        metrics: vec![table],
        wall_clock_s: start.elapsed().as_secs_f64(),
        artifacts,
        untrained,
    };
    report.save(&a.out.join("eval_report.json"))
}

fn report(a: ReportArgs) -> Result<()> {
    let mut found = false;
    let entries = fs::read_dir(&a.run).map_err(|e| Error::io(&a.run, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_report(p)).collect();
    paths.sort();
    for p in paths {
        found = true;
        println!("== {}", p.display());
        print_report(&RunReport::load(&p)?);
    }
    if !found {
        return Err(Error::Config(format!("no *_report.json in {}", a.run.display())));
    }
    Ok(())
}

fn is_report(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_report.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::TrainRecon(a) => pipeline::run_train_recon(&a.resolve(Stage::Recon)?).map(|r| print_report(&r)),
        Command::TrainDenoiser(a) => {
            pipeline::run_train_denoiser(&a.resolve(Stage::Denoiser)?).map(|r| print_report(&r))
        }
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
