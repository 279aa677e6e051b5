use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rvsl::config::{RunConfig, ECHO_FILE};
use rvsl::data::{codec, generate_dataset, Dataset, Split};
use rvsl::eval::{evaluate_dataset, translate};
use rvsl::experiment::{self, comparison_table, RunOutcome, LOSS_MATRIX, STAGE_MATRIX};
use rvsl::haze::{synthesize_haze, transmission_from_depth, HazeParams};
use rvsl::suite::gradient_suite;
use rvsl::train::CHECKPOINT_FILE;
use rvsl::{checkpoint, Error, Tensor};

#[derive(Parser)]
#[command(name = "rvsl", version, about = "Vehicle re-identification under haze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy vehicle corpus and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated corpus; writes the checkpoint, log and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one eval set and write the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the resolved config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Domain::Real)]
        domain: Domain,
    },
    /// Apply the scattering model to a clear image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        beta: f64,
        /// Either one value or three comma-separated channel values.
        #[arg(long, value_parser = parse_airlight)]
        airlight: [f64; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a hazy image to clear with a trained model.
    Dehaze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Train and evaluate the stage and loss ablation matrices.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Existing corpus; generated under OUT/data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated training seeds; defaults to train.seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Real,
    Synthetic,
}

fn parse_airlight(s: &str) -> Result<[f64; 3], String> {
    let vals = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match vals[..] {
        [a] => Ok([a; 3]),
        [r, g, b] => Ok([r, g, b]),
        _ => Err(format!("expected 1 or 3 values, got {}", vals.len())),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = format!("{}: {}", e.kind(), e).replace('\n', " ");
        if e.is_usage() {
            Failure::Usage(msg)
        } else {
            Failure::Runtime(msg)
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_or_default(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The explicit config, else the resolved config written beside the checkpoint.
fn model_config(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig, Error> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let echo = ckpt.parent().unwrap_or(Path::new(".")).join(ECHO_FILE);
    if !echo.exists() {
        return Err(Error::InvalidArgument(format!("{} not found; pass --config", echo.display())));
    }
    RunConfig::load(&echo)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Outcome {
    let cfg = config_or_default(config)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let manifest = generate_dataset(&cfg.data, seed, out)?;
    cfg.write_echo(out)?;
    println!("wrote {} records to {}", manifest.records.len(), out.display());
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Outcome {
    let cfg = config_or_default(config)?;
    let t = Instant::now();
    let (_, summary) = experiment::train(&cfg, data, Some(out))?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint {}",
        summary.iterations,
        t.elapsed().as_secs_f64(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, report: &Path, config: Option<&Path>, domain: Domain) -> Outcome {
    let cfg = model_config(ckpt, config)?;
    let models = checkpoint::load(ckpt, &cfg.net)?;
    let set = Dataset::load_where(data, |r| r.split != Split::Train)?;
    let rep = evaluate_dataset(&models, &set, matches!(domain, Domain::Real), &cfg.eval)?;
    write_text(report, &(serde_json::to_string_pretty(&rep).map_err(Error::from)? + "\n"))?;
    let cmc1 = rep.cmc_curve.first().copied().unwrap_or(f64::NAN);
    println!("mAP {:.2}  CMC@1 {:.2}", 100.0 * rep.map, 100.0 * cmc1);
    Ok(())
}

fn render(image: &Path, depth: &Path, beta: f64, airlight: [f64; 3], out: &Path) -> Outcome {
    // beta = 0 is clear air (t = 1 everywhere), below the range HazeParams accepts.
    let params = HazeParams { beta, airlight };
    if beta != 0.0 {
        params.validate()?;
    } else if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument(format!("airlight {airlight:?} outside [0,1]")).into());
    }
    let clear = codec::read_rgb(image)?;
    let depth = codec::read_depth(depth)?;
    let t = if beta == 0.0 { Tensor::ones(depth.shape()) } else { transmission_from_depth(&depth, beta)? };
    codec::write_rgb(out, &synthesize_haze(&clear, &t, &params)?)?;
    Ok(())
}

fn dehaze(ckpt: &Path, image: &Path, out: &Path, config: Option<&Path>) -> Outcome {
    let cfg = model_config(ckpt, config)?;
    let models = checkpoint::load(ckpt, &cfg.net)?;
    let img = codec::read_rgb(image)?;
    let shape = img.shape().to_vec();
    if shape[1] != cfg.net.image_size || shape[2] != cfg.net.image_size {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{}, model expects {}x{}",
            shape[1], shape[2], cfg.net.image_size, cfg.net.image_size
        ))
        .into());
    }
    let batch = img.reshape(&[1, shape[0], shape[1], shape[2]])?;
    let clear = translate(&models, batch, true)?.reshape(&shape)?;
    codec::write_rgb(out, &clear)?;
    Ok(())
}

fn gradcheck() -> Outcome {
    let t = Instant::now();
    let cases = gradient_suite()?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{} {:<8} {:<32} rel {:.2e} tol {:.0e} probes {} skipped {}",
            if ok { "ok  " } else { "FAIL" },
            format!("{:?}", c.tier).to_lowercase(),
            c.name,
            c.report.max_rel_error,
            c.report.tolerance,
            c.report.probes,
            c.report.skipped
        );
    }
    println!("{} cases, {failed} failed, {:.1}s", cases.len(), t.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Runtime(format!("gradcheck: {failed} of {} cases exceed tolerance", cases.len())));
    }
    Ok(())
}

fn ablate(config: Option<&Path>, out: &Path, data: Option<&Path>, seeds: &[u64]) -> Outcome {
    let cfg = config_or_default(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_echo(out)?;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            generate_dataset(&cfg.data, cfg.train.seed, &d)?;
            d
        }
    };
    let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds.to_vec() };
    let variants: Vec<_> = STAGE_MATRIX.iter().chain(&LOSS_MATRIX).copied().collect();
    let rows = experiment::run_matrix(&cfg, &data, &variants, &seeds, |r: &RunOutcome| {
        println!("{:<14} seed {:<3} real mAP {:6.2}  syn mAP {:6.2}", r.variant, r.seed, 100.0 * r.real.map, 100.0 * r.synthetic.map);
    })?;
    let table = comparison_table(&rows);
    write_text(&out.join("ablation.md"), &table)?;
    write_text(&out.join("ablation.json"), &(serde_json::to_string_pretty(&rows).map_err(Error::from)? + "\n"))?;
    println!("\n{table}");
    Ok(())
}

fn init_threads() -> Outcome {
    let Ok(v) = std::env::var("RVSL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("env: RVSL_THREADS must be a non-negative integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("env: {e}")))
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Eval { ckpt, data, report, config, domain } => eval(&ckpt, &data, &report, config.as_deref(), domain),
        Command::Render { image, depth, beta, airlight, out } => render(&image, &depth, beta, airlight, &out),
        Command::Dehaze { ckpt, image, out, config } => dehaze(&ckpt, &image, &out, config.as_deref()),
        Command::Gradcheck => gradcheck(),
        Command::Ablate { config, out, data, seeds } => ablate(config.as_deref(), &out, data.as_deref(), &seeds),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
