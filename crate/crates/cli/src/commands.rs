//! Subcommand bodies. Each returns the process exit status on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use damamba::harness::{
    ablation_run, evaluate, generate_dataset, resume, train, AblationBudget, SyntheticDataset,
};
use damamba::model::{Checkpoint, Mode, Model};
use damamba::Tensor;

use crate::bench::{self, BenchSpec};
use crate::config::RunConfig;
use crate::gradsuite;
use crate::pnm;
use crate::viz;

#[derive(Parser, Debug)]
#[command(name = "damamba", version, about = "Dynamic adaptive scan vision models on the CPU")]
pub struct Cli {
    /// Run configuration (`key=value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` and seeds the check and timing inputs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; recorded in the manifest, computation is single-threaded.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the synthetic glyph dataset.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Validation accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every backward pass.
    GradCheck {
        /// Restrict to one group.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
    /// Selective scan against naive attention over growing lengths.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
        reps: u64,
    },
    /// Draws the learned scan path of one stage over an image.
    ScanViz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM or PGM.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        /// SVG path; defaults to `<out>/scan_stage<k>.svg`.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Cumulative ablation of the scan, positional and FFN convolutions.
    Ablate {
        #[arg(long, default_value_t = 400)]
        steps: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::GradCheck { .. } => "grad-check",
            Command::Bench { .. } => "bench",
            Command::ScanViz { .. } => "scan-viz",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn load_config(cli: &Cli, required: bool) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if required => bail!("--config is required for this command"),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()))
}

/// Records what was run; only the `timestamp` line varies between reruns.
fn write_manifest(dir: &Path, cli: &Cli, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut s = String::new();
    let _ = writeln!(s, "command={}", cli.command.name());
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "args={:?}", cli.command);
    let _ = writeln!(s, "config_path={}", cli.config.as_ref().map_or("-".into(), |p| p.display().to_string()));
    let _ = writeln!(s, "seed={}", cli.seed.map_or("-".into(), |v| v.to_string()));
    let _ = writeln!(s, "threads={}", cli.threads.unwrap_or(1));
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let _ = writeln!(s, "timestamp={secs}");
    s.push_str(body);
    std::fs::write(dir.join("manifest.txt"), s)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    Ok(generate_dataset(&cfg.data, cfg.data_seed)?)
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train { resume: from } => cmd_train(cli, from.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(cli, checkpoint),
        Command::GradCheck { op, inject_wrong_sign } => cmd_grad_check(cli, op.as_deref(), *inject_wrong_sign),
        Command::Bench { lengths, reps } => cmd_bench(cli, lengths.as_deref(), *reps as usize),
        Command::ScanViz { checkpoint, image, stage, svg } => {
            cmd_scan_viz(cli, checkpoint, image, *stage as usize, svg.as_deref())
        }
        Command::Ablate { steps, seeds } => cmd_ablate(cli, *steps, seeds),
    }
}

fn cmd_train(cli: &Cli, from: Option<&Path>) -> Result<i32> {
    let cfg = load_config(cli, true)?;
    let out = out_dir(cli);
    let mut body = cfg.resolved();
    let _ = writeln!(body, "config_hash={}", cfg.model.hash());
    if let Some(p) = from {
        let _ = writeln!(body, "resume={}", p.display());
    }
    write_manifest(&out, cli, &body)?;
    let data = dataset(&cfg)?;
    let state = match from {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config != cfg.model {
                bail!("checkpoint model {} differs from the configured one {}", ck.config.hash(), cfg.model.hash());
            }
            resume(&ck, &data, Some(&out))?
        }
        None => train(cfg.model.clone(), &data, cfg.train.clone(), Some(&out))?,
    };
    match state.last_val() {
        Some(v) => println!("step {} val_loss {:.4} val_accuracy {:.4}", state.step, v.loss, v.accuracy),
        None => println!("step {}", state.step),
    }
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_eval(cli: &Cli, path: &Path) -> Result<i32> {
    let cfg = load_config(cli, false)?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.to_model()?;
    let data = dataset(&cfg)?;
    let (loss, acc) = evaluate(&model, &data, &data.val, cfg.train.label_smoothing)?;
    println!("val_loss {loss:.6} val_accuracy {acc:?}");
    if let Some(logged) = ck.meta.get("val.accuracy") {
        let same = logged.parse::<f64>().is_ok_and(|v| v == acc);
        println!("logged val_accuracy {logged} reproduced={same}");
    }
    let body = format!("checkpoint={}\nval_loss={loss:?}\nval_accuracy={acc:?}\n{}", path.display(), cfg.resolved());
    write_manifest(&out_dir(cli), cli, &body)?;
    Ok(0)
}

fn cmd_grad_check(cli: &Cli, op: Option<&str>, inject: bool) -> Result<i32> {
    let results = gradsuite::run_suite(op, inject, cli.seed.unwrap_or(0))?;
    let mut body = String::new();
    for r in &results {
        let line = format!(
            "{:<15} worst_rel_err {:.3e}  threshold {:.0e}  probed {:>5}  {}",
            r.op,
            r.worst,
            r.threshold,
            r.probed,
            if r.passed() { "ok" } else { "FAIL" }
        );
        println!("{line}");
        let _ = writeln!(body, "{}={:e}", r.op, r.worst);
    }
    write_manifest(&out_dir(cli), cli, &body)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

fn cmd_bench(cli: &Cli, lengths: Option<&[usize]>, reps: usize) -> Result<i32> {
    let lengths = lengths.unwrap_or(&bench::DEFAULT_LENGTHS);
    if lengths.len() < 2 || lengths.contains(&0) {
        bail!("need at least two positive lengths");
    }
    let spec = BenchSpec { reps, seed: cli.seed.unwrap_or(0), ..BenchSpec::default() };
    let rows = bench::run(lengths, &spec, |r| {
        println!("{:<15} L={:<6} {:>10.3} ms ± {:.3}", r.kernel, r.len, r.mean_ms, r.std_ms)
    })?;
    let fit = bench::fit_report(&rows);
    print!("{fit}");
    let out = out_dir(cli);
    write_manifest(&out, cli, &format!("lengths={lengths:?}\nreps={reps}\nchannels={}\nstate={}\n", spec.channels, spec.state))?;
    std::fs::write(out.join("bench.csv"), bench::to_csv(&rows))?;
    std::fs::write(out.join("bench_fit.csv"), fit)?;
    Ok(0)
}

/// `[1, H, W, 3]` input normalized like the training data.
fn image_tensor(img: &pnm::Image) -> Result<Tensor> {
    let data = img.rgb.iter().map(|&v| (v as f64 / 255.0 - 0.5) / 0.25).collect();
    Ok(Tensor::new(&[1, img.height, img.width, 3], data)?)
}

fn cmd_scan_viz(cli: &Cli, ck_path: &Path, image: &Path, stage: usize, svg: Option<&Path>) -> Result<i32> {
    let ck = Checkpoint::load(ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let model: Model = ck.to_model()?;
    if !model.config.use_das {
        bail!("checkpoint model has no dynamic adaptive scan to visualize");
    }
    if model.config.in_channels != 3 {
        bail!("scan-viz needs an RGB model, this one takes {} channels", model.config.in_channels);
    }
    let img = pnm::read(image)?;
    let x = image_tensor(&img)?;
    let trace = {
        let _ng = damamba::tensor::NoGradGuard::new();
        let fwd = model.forward(&x, Mode::Eval).context("running the model on the image")?;
        fwd.das
            .into_iter()
            .filter(|t| t.stage + 1 == stage)
            .last()
            .with_context(|| format!("stage {stage} has no scan blocks"))?
    };
    let r = &trace.resample;
    let (gh, gw) = (r.coords.shape()[1], r.coords.shape()[2]);
    let points = viz::scan_points(&r.coords, &r.raw_coords)?;
    let out = out_dir(cli);
    let svg_path = svg.map_or_else(|| out.join(format!("scan_stage{stage}.svg")), Path::to_path_buf);
    if let Some(parent) = svg_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&svg_path, viz::render_svg(&img, (gh, gw), &points))?;
    let outside = points.iter().filter(|p| p.outside).count();
    write_manifest(
        &out,
        cli,
        &format!(
            "checkpoint={}\nimage={}\nstage={stage}\nblock={}\ngrid={gh}x{gw}\noutside={outside}\nsvg={}\n",
            ck_path.display(),
            image.display(),
            trace.block,
            svg_path.display()
        ),
    )?;
    println!("stage {stage} block {}: {} points ({outside} out of grid) -> {}", trace.block, points.len(), svg_path.display());
    Ok(0)
}

fn cmd_ablate(cli: &Cli, steps: u64, seeds: &[u64]) -> Result<i32> {
    let cfg = load_config(cli, false)?;
    if steps == 0 || seeds.is_empty() {
        bail!("need a positive step budget and at least one seed");
    }
    let out = out_dir(cli);
    write_manifest(&out, cli, &format!("steps={steps}\nseeds={seeds:?}\n{}", cfg.resolved()))?;
    let data = dataset(&cfg)?;
    let budget = AblationBudget { steps, seeds: seeds.to_vec(), hyper: cfg.train.clone() };
    let report = ablation_run(&cfg.model, &data, &budget, Some(&out), |arm, seed, acc| {
        println!("{arm:<10} seed {seed}: val_accuracy {acc:.4}")
    })?;
    print!("{}", report.to_table());
    Ok(0)
}
