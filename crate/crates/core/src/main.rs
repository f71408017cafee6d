use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use raymarch_ct::error::{Error, Result};
use raymarch_ct::geometry::{make_circular_geometry, ScanGeometry};
use raymarch_ct::io::{self, RunConfig};
use raymarch_ct::metrics::evaluate;
use raymarch_ct::phantom::builtin_phantom;
use raymarch_ct::projector::{add_noise, default_step, forward_project};
use raymarch_ct::rng::Prng;
use raymarch_ct::sart::{sart_reconstruct, SartConfig};
use raymarch_ct::trainer::{extract_volume, train_with_progress};
use raymarch_ct::volume::lattice_for_bounds;

#[derive(Parser)]
#[command(name = "raymarch-ct", version, about = "Sparse-view cone-beam CT with a ray-attention neural density field")]
struct Cli {
    /// Worker threads; defaults to all cores. `1` makes every command bit-reproducible.
    #[arg(long, global = true, env = "RAYMARCH_CT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a built-in phantom.
    Phantom {
        #[arg(long)]
        /// jaw, shepp3d or blocks.
        name: String,
        #[arg(long)]
        dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate cone-beam projections of a volume on a full circular orbit.
    Project {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        views: usize,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        /// Integration step in mm; defaults to half the smallest voxel spacing.
        #[arg(long)]
        step: Option<f64>,
        /// Incident photons per ray for Poisson noise; omit for noiseless data.
        #[arg(long)]
        noise_photons: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source to isocenter distance in mm; defaults to 5x the volume half-width.
        #[arg(long)]
        sid: Option<f64>,
        /// Source to detector distance in mm; defaults to 2x the source distance.
        #[arg(long)]
        sdd: Option<f64>,
        /// Detector pixel pitch in mm; defaults to the smallest pitch that covers the volume.
        #[arg(long)]
        pitch: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a density field to a projection directory.
    Train {
        #[arg(long)]
        proj: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        no_xray_sampling: bool,
        #[arg(long)]
        no_rda: bool,
        /// Suppress per-interval loss lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Sample a trained field on a voxel grid spanning its bounds.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical SART reconstruction.
    Sart {
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        dims: usize,
        /// Allow negative densities.
        #[arg(long)]
        no_clamp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM, IoU and Dice of a prediction against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Binarization level; defaults to half the ground-truth maximum.
        #[arg(long)]
        threshold: Option<f64>,
        /// PSNR/SSIM data range; defaults to the ground-truth range.
        #[arg(long)]
        data_range: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one axis-aligned slice as an 8-bit PGM.
    Slice {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn flag(name: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{name}: {m}")),
        other => other,
    }
}

fn required(value: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::InvalidArgument(format!("{name} is required (flag or config paths section)")))
}

fn cube(dims: usize, name: &str) -> Result<[usize; 3]> {
    if dims == 0 {
        return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
    }
    Ok([dims; 3])
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { name, dims, out } => {
            let vol = builtin_phantom(&name, cube(dims, "--dims")?).map_err(|e| flag("--name", e))?;
            io::write_volume(&out, &vol)
        }
        Command::Project { vol, views, rows, cols, step, noise_photons, seed, sid, sdd, pitch, out } => {
            let volume = io::read_volume(&vol)?;
            let bounds = volume.bounds();
            let half = 0.5 * bounds.extent().max_elem();
            let sid = sid.unwrap_or(5.0 * half);
            let sdd = sdd.unwrap_or(2.0 * sid);
            let pitch = pitch.unwrap_or_else(|| ScanGeometry::covering_pitch(&bounds, sid, sdd, rows.min(cols).max(1)));
            let geom = make_circular_geometry(views, sid, sdd, rows, cols, pitch, pitch, bounds).map_err(|e| flag("project", e))?;
            let step = step.unwrap_or_else(|| default_step(&volume));
            let mut p = forward_project(&volume, &geom, step).map_err(|e| flag("--step", e))?;
            if let Some(photons) = noise_photons {
                p = add_noise(&p, photons, &mut Prng::new(seed)).map_err(|e| flag("--noise-photons", e))?;
            }
            io::write_projections(&out, &p)
        }
        Command::Train { proj, config, gt, out, report, seed, iterations, no_xray_sampling, no_rda, quiet } => {
            let mut run = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let cfg = &mut run.train;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.use_xray_sampling &= !no_xray_sampling;
            cfg.use_rda &= !no_rda;
            cfg.validate().map_err(|e| flag("train config", e))?;
            let proj = required(proj.or(run.paths.proj.clone()), "--proj")?;
            let out = required(out.or(run.paths.out.clone()), "--out")?;
            let report_path = report.or(run.paths.report.clone());
            let gt = gt.or(run.paths.gt.clone()).map(|p| io::read_volume(&p)).transpose()?;
            let projections = io::read_projections(&proj)?;
            let (field, rep) = train_with_progress(&projections, &run.train, gt.as_ref(), |step, loss| {
                if !quiet {
                    eprintln!("step {step:>6}  loss {loss:.6e}");
                }
            })?;
            io::write_checkpoint(&out, &field, run.train.seed)?;
            if let Some(m) = &rep.final_metrics {
                eprintln!("psnr {:.3} dB  ssim {:.4}  iou {:.4}  dice {:.4}", m.psnr_db, m.ssim, m.iou, m.dice);
            }
            match report_path {
                Some(path) => io::write_json(&path, &rep),
                None => Ok(()),
            }
        }
        Command::Extract { ckpt, dims, out } => {
            let (field, _) = io::read_checkpoint(&ckpt)?;
            let dims = cube(dims, "--dims")?;
            let (spacing, origin) = lattice_for_bounds(&field.bounds, dims)?;
            let vol = extract_volume(&field, dims, spacing, origin)?;
            io::write_volume(&out, &vol)
        }
        Command::Sart { proj, iters, lambda, dims, no_clamp, out } => {
            let p = io::read_projections(&proj)?;
            let mut cfg = SartConfig { nonneg_clamp: !no_clamp, ..SartConfig::default() };
            if let Some(i) = iters {
                cfg.iterations = i;
            }
            if let Some(l) = lambda {
                cfg.relaxation = l;
            }
            cfg.validate().map_err(|e| flag("--iters/--lambda", e))?;
            let dims = cube(dims, "--dims")?;
            let (spacing, origin) = lattice_for_bounds(&p.geom.volume_bounds, dims)?;
            let vol = sart_reconstruct(&p, dims, spacing, origin, &cfg)?;
            io::write_volume(&out, &vol)
        }
        Command::Eval { gt, pred, threshold, data_range, out } => {
            let g = io::read_volume(&gt)?;
            let p = io::read_volume(&pred)?;
            let report = evaluate(&g, &p, data_range, threshold).map_err(|e| flag("--gt/--pred", e))?;
            match out {
                Some(path) => io::write_json(&path, &report),
                None => {
                    print_json(&report);
                    Ok(())
                }
            }
        }
        Command::Slice { vol, axis, index, out } => {
            let v = io::read_volume(&vol)?;
            io::write_slice(&out, &v, axis as usize, index).map_err(|e| flag("--axis/--index", e))
        }
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidState(format!("--threads: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads(cli.threads).and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
