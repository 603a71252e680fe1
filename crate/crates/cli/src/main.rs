//! `ggpfn` command-line tool: phantom synthesis, training, inference,
//! evaluation and gradient self-checks.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ggpfn::gradcheck::{op_check_names, run_suite, GRAD_TOLERANCE, MODEL_CHECK};
use ggpfn::infer::{dsc, format_pr, fuse_weighted, pr_curve, segment_volume_view, threshold_mask};
use ggpfn::model::Checkpoint;
use ggpfn::train::{train_full_schedule, StageKind};
use ggpfn::volume::{load_volume, make_phantom, save_volume, ViewPlane, VolumeFormat, VolumeGrid};
use ggpfn::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ggpfn", version, about = "Globally guided progressive fusion network for volume segmentation")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write labelled synthetic phantom volumes and a manifest.
    Synth(SynthArgs),
    /// Train one view's network from a configuration file.
    Train(TrainArgs),
    /// Segment a volume with one or more per-view checkpoints.
    Infer(InferArgs),
    /// Score a probability volume against labelled ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of volumes.
    #[arg(long, default_value_t = 2)]
    count: usize,
    /// Extents as l,h,w (each at least 16).
    #[arg(long, value_delimiter = ',', default_values_t = [24, 64, 64])]
    extents: Vec<usize>,
    /// Seed of the first volume; volume i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labelled ellipsoids per volume.
    #[arg(long, default_value_t = 2)]
    blobs: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration with [model], [train] and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run only these stages (global, pfn, joint). Repeatable; default all.
    #[arg(long = "stage")]
    stages: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory; overrides `data.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file; its configuration names the view it serves. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Input volume (`.nii` is read as NIfTI-1, anything else as raw_v1).
    #[arg(long)]
    volume: PathBuf,
    /// Views to segment and fuse.
    #[arg(long, value_delimiter = ',', default_value = "axial,sagittal,coronal")]
    views: Vec<String>,
    /// Fusion weights, one per view. Default: the checkpoints' view weights
    /// for three views, equal weights otherwise.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Output probability volume (raw_v1).
    #[arg(long)]
    out: PathBuf,
    /// Also write each view's probabilities next to the output.
    #[arg(long)]
    per_view: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Probability volume (raw_v1 intensities in [0, 1]).
    #[arg(long)]
    pred: PathBuf,
    /// Volume carrying the ground-truth labels.
    #[arg(long)]
    gt: PathBuf,
    /// Metrics file.
    #[arg(long)]
    out: PathBuf,
    /// Precision-recall table; default `<out>.pr.tsv`.
    #[arg(long)]
    pr: Option<PathBuf>,
    /// Number of PR thresholds.
    #[arg(long, default_value_t = 99)]
    thresholds: usize,
    /// Threshold for the DSC.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Probe at most this many elements of each model parameter.
    #[arg(long)]
    per_tensor: Option<usize>,
    /// Give the named check a deliberately wrong derivative.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config(_) => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let mut cmd = Cli::command();
    let defaults = RunConfig::default().to_toml().unwrap_or_default();
    cmd = cmd.mut_subcommand("train", |c| {
        c.after_long_help(format!("Configuration keys and their defaults:\n\n{defaults}"))
    });
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; parse errors are usage errors.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let extents: [usize; 3] = a.extents.try_into().map_err(|_| Failure::usage("--extents needs l,h,w"))?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let mut manifest = String::new();
    for i in 0..a.count {
        let seed = a.seed + i as u64;
        let vg = make_phantom(seed, extents, a.blobs).map_err(|e| Failure::usage(e.to_string()))?;
        let name = format!("phantom_{i:03}.vol");
        save_volume(&vg, a.out.join(&name), VolumeFormat::RawV1)?;
        manifest.push_str(&format!("{name}\t{seed}\n"));
    }
    let path = a.out.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| io_failure(&path, e))?;
    println!("wrote {} volumes and {}", a.count, path.display());
    Ok(())
}

fn load_any(path: &Path) -> Result<VolumeGrid, Failure> {
    load_volume(path, VolumeFormat::from_path(path)).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let run = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    if a.print_config {
        print!("{}", run.to_toml()?);
        return Ok(());
    }
    let stages = if a.stages.is_empty() {
        StageKind::ALL.to_vec()
    } else {
        a.stages.iter().map(|s| s.parse()).collect::<Result<Vec<StageKind>, _>>()?
    };
    let out_dir = a
        .out
        .clone()
        .or_else(|| run.data.out_dir.clone())
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set data.out_dir"))?;
    let train_vols = run.data.train.iter().map(|p| load_any(p)).collect::<Result<Vec<_>, _>>()?;
    let val_vols = run.data.val.iter().map(|p| load_any(p)).collect::<Result<Vec<_>, _>>()?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;

    fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let log_path = out_dir.join("train.log");
    let log_file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut write_err = None;
    let outcome = train_full_schedule(&run.model, &run.train, &train_vols, &val_vols, &stages, resume, &mut |r| {
        println!("{r}");
        if let Err(e) = writeln!(log, "{r}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_failure(&log_path, e));
    }
    outcome.best.save(out_dir.join("best.ckpt"))?;
    outcome.last.save(out_dir.join("last.ckpt"))?;
    fs::write(out_dir.join("config.toml"), run.to_toml()?).map_err(|e| io_failure(&out_dir, e))?;
    println!(
        "best val_dsc={:.6} at epoch {}; checkpoints in {}",
        outcome.best_dsc,
        outcome.best_epoch,
        out_dir.display()
    );
    Ok(())
}

fn per_view_path(out: &Path, view: ViewPlane) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("probabilities");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("vol");
    out.with_file_name(format!("{stem}.{}.{ext}", view.name()))
}

fn infer(a: InferArgs) -> Result<(), Failure> {
    let views = a.views.iter().map(|v| v.parse::<ViewPlane>()).collect::<Result<Vec<_>, _>>()?;
    if views.is_empty() {
        return Err(Failure::usage("no views requested"));
    }
    let mut checkpoints = Vec::new();
    for path in &a.checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        checkpoints.push(ck);
    }
    let vg = load_any(&a.volume)?;

    let mut maps = Vec::with_capacity(views.len());
    for &view in &views {
        let ck = checkpoints
            .iter()
            .find(|c| c.config.view == view)
            .ok_or_else(|| Failure::usage(format!("no checkpoint for the {} view", view.name())))?;
        maps.push(segment_volume_view(&vg, view, &ck.params, &ck.config)?);
    }
    let weights = match (&a.weights, views.len()) {
        (Some(w), n) if w.len() != n => {
            return Err(Failure::usage(format!("{} weights given for {n} views", w.len())));
        }
        (Some(w), _) => w.clone(),
        (None, 3) => {
            let vw = checkpoints[0].config.view_weights;
            views.iter().map(|v| vw[view_index(*v)]).collect()
        }
        (None, n) => vec![1.0 / n as f64; n],
    };
    let fused = if maps.len() == 1 {
        maps[0].clone()
    } else {
        let pairs: Vec<(&[f32], f64)> = maps.iter().map(|m| m.as_slice()).zip(weights.iter().copied()).collect();
        fuse_weighted(&pairs)?
    };
    let write = |probs: Vec<f32>, path: &Path| -> Result<(), Failure> {
        let out = VolumeGrid::new(vg.extents, vg.spacing, probs, None)?;
        save_volume(&out, path, VolumeFormat::RawV1).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    };
    if a.per_view {
        for (view, m) in views.iter().zip(&maps) {
            write(m.clone(), &per_view_path(&a.out, *view))?;
        }
    }
    write(fused, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn view_index(v: ViewPlane) -> usize {
    match v {
        ViewPlane::Axial => 0,
        ViewPlane::Sagittal => 1,
        ViewPlane::Coronal => 2,
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let pred = load_any(&a.pred)?;
    let gt = load_any(&a.gt)?;
    if pred.extents != gt.extents {
        return Err(Failure::data(format!("extents differ: {:?} vs {:?}", pred.extents, gt.extents)));
    }
    let labels = gt.labels.as_ref().ok_or_else(|| Failure::data(format!("{} has no labels", a.gt.display())))?;
    let score = dsc(&threshold_mask(&pred.intensities, a.threshold), labels)?;
    let pr_path = a.pr.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".pr.tsv");
        PathBuf::from(p)
    });
    let points = pr_curve(&pred.intensities, labels, a.thresholds)?;
    fs::write(&a.out, format!("dsc\t{score:.6}\nthreshold\t{}\n", a.threshold)).map_err(|e| io_failure(&a.out, e))?;
    let mut f = File::create(&pr_path).map_err(|e| io_failure(&pr_path, e))?;
    f.write_all(format_pr(&points).as_bytes()).map_err(|e| io_failure(&pr_path, e))?;
    println!("dsc {score:.6}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if let Some(name) = &a.inject_fault {
        if name != MODEL_CHECK && !op_check_names().contains(&name.as_str()) {
            return Err(Failure::usage(format!("unknown gradient check '{name}'")));
        }
    }
    let reports = run_suite(a.inject_fault.as_deref(), a.per_tensor)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:.3e} {status}", r.name, r.max_rel_err);
        failed += !r.passed() as usize;
    }
    if failed > 0 {
        return Err(Failure { code: 3, message: format!("{failed} gradient check(s) above {GRAD_TOLERANCE:e}") });
    }
    println!("all {} checks within {GRAD_TOLERANCE:e}", reports.len());
    Ok(())
}
