use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use prnu_match::bench::{bench_batch, bench_single, write_csv as write_bench_csv, DEFAULT_REPS};
use prnu_match::eval::{domain_grid, open_set_eval, DeviceSplit, PceScorer, PcnScorer, Scorer};
use prnu_match::fingerprint::{estimate_prnu, load_residual, save_fingerprint, save_residual, FingerprintDb};
use prnu_match::imaging::load_image;
use prnu_match::parallel::{resolve_threads, with_threads, THREADS_ENV};
use prnu_match::pcn::{load_model_expecting, save_model, ArchDescriptor, PcnModel};
use prnu_match::residual::{extract_residual, DenoiserConfig};
use prnu_match::synth::{build_dataset, load_dataset, SynthConfig, DEFAULT_NOISE_STD};
use prnu_match::training::{train, DeviceSet, TrainConfig};
use prnu_match::Error;

#[derive(Parser, Debug)]
#[command(name = "prnu-match", version, about = "PRNU camera source identification with PCE and a pair-wise correlation network")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Estimate a fingerprint from a directory of flat-field images.
    Fingerprint(FingerprintArgs),
    /// Extract the noise residual of one image.
    Residual(ResidualArgs),
    /// Rank the devices of a fingerprint directory against one residual.
    Match(MatchArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// Closed- and open-set evaluation on a dataset's eval split.
    Eval(EvalArgs),
    /// Train on single- and double-compressed data and cross-evaluate.
    Grid(GridArgs),
    /// Time single-pair and batched matching.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    devices: usize,
    #[arg(long, default_value_t = 25)]
    flats: usize,
    #[arg(long, default_value_t = 40)]
    naturals: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0.02)]
    strength: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    noise_std: f64,
    /// Comma-separated JPEG qualities applied in order, e.g. `80,90`.
    #[arg(long, value_delimiter = ',')]
    jpeg: Vec<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FingerprintArgs {
    /// Directory of flat-field images (pgm, png or jpeg).
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    device_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ResidualArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    Pce,
    Pcn,
}

#[derive(Args, Debug)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = ScorerKind::Pce)]
    scorer: ScorerKind,
    /// Trained model, required with `--scorer pcn`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Central crop side.
    #[arg(short = 'P', long = "patch", default_value_t = 64)]
    patch: usize,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    residual: PathBuf,
    /// Directory of `.prnu` fingerprint files.
    #[arg(long)]
    db: PathBuf,
    #[command(flatten)]
    scorer: ScorerArgs,
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(short = 'P', long = "patch", default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Batches per epoch (default: mean training pool size).
    #[arg(long)]
    batches: Option<usize>,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            crop: self.patch,
            batches_per_epoch: self.batches,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Device index range used for training, e.g. `0..10` (default: all).
    #[arg(long)]
    devices: Option<String>,
    #[command(flatten)]
    opts: TrainOpts,
    /// Model output path; the history goes next to it as `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Fingerprint directory to use instead of re-estimating from flats.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Device index range to evaluate, e.g. `10..20` (default: all).
    #[arg(long)]
    devices: Option<String>,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Directory for scores.csv, report.csv and roc.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    single: PathBuf,
    #[arg(long)]
    double: PathBuf,
    /// Number of leading devices used for training; the rest evaluate.
    #[arg(long)]
    train_devices: usize,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = ScorerKind::Pcn)]
    scorer: ScorerKind,
    /// Model to time; a seeded random initialization when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(short = 'P', long = "patch", default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 87)]
    db_size: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) => 2,
        Error::Format(_)
        | Error::Dimension(_)
        | Error::DegenerateInput(_)
        | Error::EmptyInput(_)
        | Error::Duplicate(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn echo(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        eprintln!("config {k} = {v}");
    }
}

fn parse_range(spec: &str, total: usize) -> prnu_match::Result<Vec<usize>> {
    let bad = || Error::Config(format!("device range {spec:?} must look like `a..b` within 0..{total}"));
    let (a, b) = spec.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a >= b || b > total {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn select(ds: DeviceSet, range: Option<&str>) -> prnu_match::Result<DeviceSet> {
    match range {
        Some(r) => ds.subset(&parse_range(r, ds.len())?),
        None => Ok(ds),
    }
}

fn make_scorer(args: &ScorerArgs) -> prnu_match::Result<Box<dyn Scorer>> {
    Ok(match args.scorer {
        ScorerKind::Pce => Box::new(PceScorer::default()),
        ScorerKind::Pcn => {
            let path = args.model.as_ref().ok_or_else(|| Error::Config("--scorer pcn needs --model".into()))?;
            Box::new(PcnScorer::new(load_model_expecting(path, &ArchDescriptor::default())?))
        }
    })
}

fn image_files(dir: &Path) -> prnu_match::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn run(cli: Cli, threads: usize) -> prnu_match::Result<()> {
    let denoiser = DenoiserConfig::default();
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n_devices: a.devices,
                flats_per_device: a.flats,
                naturals_per_device: a.naturals,
                dims: (a.size, a.size),
                strength: a.strength,
                noise_std: a.noise_std,
                jpeg_chain: a.jpeg.clone(),
                seed: a.seed,
                ..SynthConfig::default()
            };
            echo(&[("command", "synth".into()), ("out", a.out.display().to_string()), ("synth", format!("{cfg:?}"))]);
            fs::create_dir_all(&a.out)?;
            let ds = build_dataset(&cfg, Some(&a.out))?;
            println!("wrote {} devices to {}", ds.devices.len(), a.out.display());
        }
        Command::Fingerprint(a) => {
            echo(&[
                ("command", "fingerprint".into()),
                ("images", a.images.display().to_string()),
                ("device_id", a.device_id.clone()),
                ("out", a.out.display().to_string()),
            ]);
            let images = image_files(&a.images)?.iter().map(load_image).collect::<prnu_match::Result<Vec<_>>>()?;
            let fp = estimate_prnu(&a.device_id, &images, &denoiser)?;
            save_fingerprint(&fp, &a.out)?;
            println!("fingerprint {} from {} images, {}x{}", fp.device_id, fp.n_images, fp.k.rows(), fp.k.cols());
        }
        Command::Residual(a) => {
            echo(&[
                ("command", "residual".into()),
                ("image", a.image.display().to_string()),
                ("out", a.out.display().to_string()),
            ]);
            let w = extract_residual(&load_image(&a.image)?, &denoiser)?;
            save_residual(&w, &a.out)?;
            println!("residual {}x{}", w.values.rows(), w.values.cols());
        }
        Command::Match(a) => {
            echo(&[
                ("command", "match".into()),
                ("residual", a.residual.display().to_string()),
                ("db", a.db.display().to_string()),
                ("scorer", format!("{:?}", a.scorer.scorer)),
                ("P", a.scorer.patch.to_string()),
                ("threads", threads.to_string()),
            ]);
            let scorer = make_scorer(&a.scorer)?;
            let db = FingerprintDb::load_dir(&a.db)?;
            let p = a.scorer.patch;
            let w = load_residual(&a.residual)?.values.central_square(p)?;
            let fps = db.entries().iter().map(|f| f.k.central_square(p)).collect::<prnu_match::Result<Vec<_>>>()?;
            let refs: Vec<_> = fps.iter().collect();
            let scores = scorer.score_row(&w, &refs)?;
            let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
            ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            println!("rank\tdevice\tscore");
            for (rank, (i, s)) in ranked.iter().enumerate() {
                println!("{}\t{}\t{s:.6}", rank + 1, db.entries()[*i].device_id);
            }
        }
        Command::Train(a) => {
            let cfg = a.opts.config();
            echo(&[
                ("command", "train".into()),
                ("dataset", a.dataset.display().to_string()),
                ("devices", a.devices.clone().unwrap_or_else(|| "all".into())),
                ("train", format!("{cfg:?}")),
                ("out", a.out.display().to_string()),
                ("threads", threads.to_string()),
            ]);
            let ds = select(load_dataset(&a.dataset, &denoiser)?, a.devices.as_deref())?;
            let (model, history) = train(&ds, &cfg)?;
            save_model(&model, &a.out)?;
            let csv = a.out.with_extension("csv");
            history.save_csv(&csv)?;
            println!(
                "trained {} epochs ({}), best epoch {} val accuracy {:.4}; model {} history {}",
                history.epochs.len(),
                history.stopped_reason,
                history.best_epoch,
                history.best().val_accuracy,
                a.out.display(),
                csv.display()
            );
        }
        Command::Eval(a) => {
            echo(&[
                ("command", "eval".into()),
                ("dataset", a.dataset.display().to_string()),
                ("db", a.db.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "from flats".into())),
                ("devices", a.devices.clone().unwrap_or_else(|| "all".into())),
                ("scorer", format!("{:?}", a.scorer.scorer)),
                ("P", a.scorer.patch.to_string()),
                ("out", a.out.display().to_string()),
                ("threads", threads.to_string()),
            ]);
            let scorer = make_scorer(&a.scorer)?;
            let mut ds = select(load_dataset(&a.dataset, &denoiser)?, a.devices.as_deref())?;
            if let Some(dir) = &a.db {
                let db = FingerprintDb::load_dir(dir)?;
                for d in &mut ds.devices {
                    d.fingerprint = db
                        .get(&d.device_id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no fingerprint for {} in {}", d.device_id, dir.display())))?;
                }
            }
            let (report, sm) = open_set_eval(&ds, scorer.as_ref(), a.scorer.patch)?;
            report.save(&sm, &a.out)?;
            println!("a_cs {:.4} auc_os {:.4}", report.a_cs, report.auc_os);
        }
        Command::Grid(a) => {
            let cfg = a.opts.config();
            echo(&[
                ("command", "grid".into()),
                ("single", a.single.display().to_string()),
                ("double", a.double.display().to_string()),
                ("train_devices", a.train_devices.to_string()),
                ("train", format!("{cfg:?}")),
                ("out", a.out.display().to_string()),
                ("threads", threads.to_string()),
            ]);
            let single = load_dataset(&a.single, &denoiser)?;
            let double = load_dataset(&a.double, &denoiser)?;
            if a.train_devices == 0 || a.train_devices >= single.len() {
                return Err(Error::Config(format!(
                    "--train-devices must leave at least one of {} devices for evaluation",
                    single.len()
                )));
            }
            let report = domain_grid(&single, &double, &DeviceSplit::first(a.train_devices, single.len()), &cfg)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(&a.out, &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Bench(a) => {
            echo(&[
                ("command", "bench".into()),
                ("scorer", format!("{:?}", a.scorer)),
                ("P", a.patch.to_string()),
                ("db_size", a.db_size.to_string()),
                ("reps", a.reps.to_string()),
                ("threads", threads.to_string()),
                ("out", a.out.display().to_string()),
            ]);
            let pcn = || -> prnu_match::Result<PcnScorer> {
                Ok(PcnScorer::new(match &a.model {
                    Some(p) => load_model_expecting(p, &ArchDescriptor::default())?,
                    None => PcnModel::init(ArchDescriptor::default(), 0)?,
                }))
            };
            let mut results = Vec::new();
            match a.scorer {
                ScorerKind::Pce => results.push(bench_single(&PceScorer::default(), a.patch, a.reps)?),
                ScorerKind::Pcn => {
                    let scorer = pcn()?;
                    results.push(bench_single(&scorer, a.patch, a.reps)?);
                    let cmp = bench_batch(&scorer, a.patch, a.db_size, threads, a.reps)?;
                    info!("batched/sequential ratio {:.3}, max score difference {:e}", cmp.ratio(), cmp.max_abs_diff);
                    results.push(cmp.batched);
                    results.push(cmp.sequential);
                }
            }
            let mut buf = Vec::new();
            write_bench_csv(&results, &mut buf)?;
            fs::write(&a.out, &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = resolve_threads(cli.threads).and_then(|threads| {
        eprintln!("config threads = {threads}");
        with_threads(threads, || run(cli, threads))?
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
