use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use skf_core::config::{TrainConfig, KEYS};
use skf_core::data::{
    load_dataset, read_image, read_labels, save_dataset, write_image, Dataset, DatasetConfig, DegradeConfig, SceneConfig, Split,
};
use skf_core::gradcheck;
use skf_core::histogram::{erode_segment_masks, soft_histogram, split_into_patches, DEFAULT_ALPHA, DEFAULT_EROSION_RADIUS};
use skf_core::metrics::{ImageMetrics, MetricsReport};
use skf_core::trainer::{ablation_table, build_provider, compute_priors, dataset_class_count, load_generator, parse_rows, run_ablation, Trainer};
use skf_core::{Error, LabelMap};

/// Environment variable naming the default dataset directory.
const DATA_ROOT_ENV: &str = "SKF_DATA_ROOT";

mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const LOAD: u8 = 5;
    pub const IO: u8 = 6;
    pub const NON_FINITE: u8 = 7;
    pub const GRADCHECK: u8 = 8;
    pub const NO_CANDIDATES: u8 = 9;
}

#[derive(Parser)]
#[command(name = "skf", version, about = "Semantic-guided low-light enhancement: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset with ground-truth segmentation.
    GenerateData {
        /// Output directory (default: $SKF_DATA_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Train from a config file; `--key value` overrides any config key.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Enhance the low-light images of a dataset split with a checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for `<id>.rgb` outputs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against references and emit the metrics CSV.
    Eval {
        /// Directory of `<id>.rgb` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>.rgb` references (else the dataset's normal images).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Directory of `<id>.labels` maps; without it each image is one segment.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Dataset providing references and labels when --target is absent.
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train each toggle row for each seed and print a comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "baseline,sch,se,sch+se,all")]
        rows: String,
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Per-segment soft histograms as CSV (class, channel, bin, value).
    Histogram {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_EROSION_RADIUS)]
        erosion_radius: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Usage(String),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Input(_) | Error::Shape(_) => exit::INPUT,
        Error::Load { .. } => exit::LOAD,
        Error::Io { .. } => exit::IO,
        Error::NonFinite { .. } => exit::NON_FINITE,
        Error::NoCandidates => exit::NO_CANDIDATES,
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::Core(Error::Config(format!("no dataset directory: pass --data-root or set {DATA_ROOT_ENV}"))))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Failure::Usage(format!("unknown split {s:?} (train, val or test)"))),
    }
}

/// Apply `--key value` / `--key=value` pairs; dashes in keys map to underscores.
fn apply_overrides(cfg: &mut TrainConfig, args: &[String]) -> Result<(), Failure> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg.strip_prefix("--").ok_or_else(|| Failure::Usage(format!("unexpected argument {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (flag.to_string(), it.next().ok_or_else(|| Failure::Usage(format!("--{flag} needs a value")))?.clone()),
        };
        let mut key = key.replace('-', "_");
        if key == "gan_label_convention" {
            key = "gan_labels".into();
        }
        if !KEYS.contains(&key.as_str()) {
            return Err(Failure::Usage(format!("unknown flag --{flag}")));
        }
        cfg.set(&key, &value)?;
    }
    cfg.validate()?;
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    if cfg.data_root.is_none() {
        cfg.data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    }
    Ok(cfg)
}

fn load_config_dataset(cfg: &TrainConfig) -> Result<Dataset, Failure> {
    let root = cfg
        .data_root
        .as_ref()
        .ok_or_else(|| Failure::Core(Error::Config(format!("no dataset directory: set data_root or {DATA_ROOT_ENV}"))))?;
    Ok(load_dataset(root)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Core(Error::io(p, e))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenerateData { out, seed, train, val, test, height, width, classes } => {
            let root = data_root(out)?;
            let cfg = DatasetConfig {
                master_seed: seed,
                train,
                val,
                test,
                scene: SceneConfig { height, width, class_count: classes, ..Default::default() },
                degrade: DegradeConfig::default(),
            };
            let ds = Dataset::generate(&cfg)?;
            save_dataset(&root, &ds)?;
            eprintln!("wrote {} pairs to {}", ds.entries.len(), root.display());
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let ds = load_config_dataset(&cfg)?;
            let resume = cfg.resume.clone();
            let mut t = Trainer::new(cfg, &ds)?;
            if let Some(path) = resume {
                t.resume_from(&path)?;
                eprintln!("resumed at step {}", t.step);
            }
            let start = Instant::now();
            t.run()?;
            for line in t.log.iter().filter(|l| l.starts_with("val ")) {
                eprintln!("{line}");
            }
            eprintln!("trained {} steps in {:.1}s; best validation PSNR {:.3} dB at step {}", t.step, start.elapsed().as_secs_f64(), t.best_psnr, t.best_step);
        }
        Command::Enhance { checkpoint, data_root: root, split, out } => {
            let split = parse_split(&split)?;
            let gen = load_generator(&checkpoint)?;
            let ds = load_dataset(&data_root(root)?)?;
            let provider = build_provider(&gen.config, dataset_class_count(&ds))?;
            let priors = compute_priors(provider.as_ref(), &ds)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut n = 0;
            for (e, prior) in ds.entries.iter().zip(&priors).filter(|(e, _)| e.split == split) {
                let img = gen.net.enhance(&gen.store, &e.pair.low, gen.net.has_se().then_some(prior))?;
                write_image(&out.join(format!("{}.rgb", e.id)), &img)?;
                n += 1;
            }
            eprintln!("enhanced {n} images into {}", out.display());
        }
        Command::Eval { pred, target, labels, data_root: root, split, out } => {
            let report = match target {
                Some(target) => eval_dirs(&pred, &target, labels.as_deref())?,
                None => {
                    let split = parse_split(&split)?;
                    let ds = load_dataset(&data_root(root)?)?;
                    let per_image = ds
                        .split(split)
                        .iter()
                        .map(|e| ImageMetrics::compute(e.id.clone(), &read_image(&pred.join(format!("{}.rgb", e.id)))?, &e.pair.normal, &e.pair.labels))
                        .collect::<Result<Vec<_>, _>>()?;
                    MetricsReport { per_image }
                }
            };
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Command::Gradcheck { seed } => {
            let start = Instant::now();
            let results = gradcheck::run_all(seed);
            for r in &results {
                println!(
                    "{} {:<18} entries={:<5} max_rel_err={:.3e} threshold={:.0e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.entries,
                    r.max_relative_error,
                    r.threshold
                );
            }
            println!("{:.2}s", start.elapsed().as_secs_f64());
            if !results.iter().all(|r| r.passed()) {
                return Err(Failure::Gradcheck);
            }
        }
        Command::Ablate { config, rows, seeds, out, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Failure::Usage(format!("bad seed {s:?}"))))
                .collect::<Result<_, _>>()?;
            let rows = parse_rows(&rows, &cfg)?;
            let ds = load_config_dataset(&cfg)?;
            let results = run_ablation(&ds, &rows, &seeds, |r| {
                eprintln!("{} seed={} psnr={:.3} ssim={:.4} seg_err={:.5}", r.row, r.seed, r.psnr, r.ssim, r.segment_color_error)
            })?;
            let table = ablation_table(&rows, &results);
            print!("{table}");
            if let Some(p) = out {
                fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Histogram { image, labels, alpha, erosion_radius, out } => {
            let img = read_image(&image)?;
            let labels = read_labels(&labels)?;
            let set = erode_segment_masks(&split_into_patches(&img, &labels)?, erosion_radius);
            let mut csv = String::from("class,channel,bin,value\n");
            for patch in &set.patches {
                for (ch, name) in ["r", "g", "b"].iter().enumerate() {
                    let values: Vec<f64> = patch.values.iter().map(|v| v[ch]).collect();
                    let h = soft_histogram(&values, alpha)?;
                    for (bin, v) in h.bins.iter().enumerate() {
                        csv.push_str(&format!("{},{name},{bin},{v:e}\n", patch.class_id));
                    }
                }
            }
            write_or_print(out.as_deref(), &csv)?;
        }
    }
    Ok(())
}

/// Pair `<id>.rgb` files present in both directories.
fn eval_dirs(pred: &Path, target: &Path, labels: Option<&Path>) -> Result<MetricsReport, Failure> {
    let mut ids: Vec<String> = fs::read_dir(target)
        .map_err(|e| Error::io(target, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".rgb")).map(str::to_string))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Input(format!("no .rgb files in {}", target.display())).into());
    }
    let per_image = ids
        .iter()
        .map(|id| {
            let t = read_image(&target.join(format!("{id}.rgb")))?;
            let p = read_image(&pred.join(format!("{id}.rgb")))?;
            let l = match labels {
                Some(dir) => read_labels(&dir.join(format!("{id}.labels")))?,
                None => LabelMap::new(t.height(), t.width(), vec![0; t.pixel_count()])?,
            };
            ImageMetrics::compute(id.clone(), &p, &t, &l)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport { per_image })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(exit::USAGE)
        }
        Err(Failure::Gradcheck) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(exit::GRADCHECK)
        }
    }
}
