//! `convtab`: train, evaluate, benchmark, verify, and export
//! convolutional-table networks.
//!
//! Exit codes: 0 on success, 1 when a verification or acceptance check
//! fails, 2 on usage, configuration, or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convtab_core::cost::{speedup_ratio, wall_bench, DEFAULT_C_B};
use convtab_core::fern::SoftConfig;
use convtab_core::network::{ForwardMode, LayerSpec, Network, NetworkSpec};
use convtab_core::theory::{build_rectangle_network, build_shatter_instance, verify_shatter, RectangleSpec};
use convtab_io::{load_cifar10, load_mnist, load_model, load_teacher_logits, save_model, save_model_i8, Dataset};
use convtab_train::driver::{train_three_phase, EpochMetrics, PhasePlan, TrainConfig};
use convtab_train::loss::DistillConfig;
use convtab_train::sgd::SgdConfig;
use convtab_train::AnnealSchedule;

#[derive(Parser)]
#[command(name = "convtab", version, about = "Deep networks from ferns and voting tables")]
struct Cli {
    /// Worker threads for data-parallel sections (1 forces fully serial
    /// runs; default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Three-phase training; writes a model and a metrics log.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset; prints the error rate.
    Eval(EvalArgs),
    /// Cost-model and wall-time comparisons, CSV on stdout.
    Bench(BenchArgs),
    /// Run the capacity constructions and their brute-force checks.
    Verify(VerifyArgs),
    /// Re-serialize a model at full or 8-bit table precision.
    Export(ExportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset format.
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    /// Image file (MNIST IDX, optionally gzipped) or comma-separated
    /// CIFAR-10 batch files.
    #[arg(long)]
    images: String,
    /// Label file (MNIST only).
    #[arg(long)]
    labels: Option<String>,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn load(&self, stage: &str) -> Result<Dataset, String> {
        let mut ds = match self.dataset {
            DatasetKind::Mnist => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| format!("{stage}: --labels is required for --dataset mnist"))?;
                load_mnist(&PathBuf::from(&self.images), &PathBuf::from(labels))
                    .map_err(|e| format!("{stage}: {e}"))?
            }
            DatasetKind::Cifar10 => {
                let paths: Vec<PathBuf> = self.images.split(',').map(PathBuf::from).collect();
                load_cifar10(&paths).map_err(|e| format!("{stage}: {e}"))?
            }
        };
        if let Some(n) = self.limit {
            ds.truncate(n);
        }
        if ds.is_empty() {
            return Err(format!("{stage}: dataset is empty"));
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture: a config file path or a builtin name
    /// (mnist-2, cifar10-4, cifar10-6).
    #[arg(long)]
    arch: String,

    #[command(flatten)]
    data: DataArgs,

    /// Validation images (same format as --images), evaluated hard each
    /// epoch.
    #[arg(long)]
    val_images: Option<String>,
    #[arg(long)]
    val_labels: Option<String>,
    #[arg(long)]
    val_limit: Option<usize>,

    /// Epochs per phase, e.g. 3,2,5.
    #[arg(long, default_value = "3,2,5")]
    epochs: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,

    /// Initial ambiguous-bit fraction.
    #[arg(long, default_value_t = 0.2)]
    f0: f64,
    /// Per-epoch decay of the ambiguous fraction.
    #[arg(long, default_value_t = 0.85)]
    decay: f64,
    /// Fraction floor; at the floor training continues hard.
    #[arg(long, default_value_t = 0.005)]
    f_floor: f64,
    /// Sigmoid half-width before the first recalibration.
    #[arg(long, default_value_t = 0.5)]
    t0: f64,
    /// Epochs between half-width recalibrations.
    #[arg(long, default_value_t = 1)]
    recalib: usize,

    /// Teacher logits for phase-3 distillation.
    #[arg(long)]
    teacher_logits: Option<PathBuf>,
    /// Cross-entropy weight of the distillation loss.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Distillation temperature at the start of phase 3.
    #[arg(long, default_value_t = 4.0)]
    temp: f64,
    /// Distillation temperature at the end of phase 3.
    #[arg(long, default_value_t = 1.0)]
    temp_end: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Examples in the fixed calibration batch.
    #[arg(long, default_value_t = 64)]
    calibration: usize,
    /// Element-wise clip on the gradient passed between CT layers
    /// (0 disables).
    #[arg(long, default_value_t = 1.0)]
    clip: f64,

    /// Output model path.
    #[arg(long)]
    out_model: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    data: DataArgs,

    /// Forward mode.
    #[arg(long, value_enum, default_value_t = EvalMode::Hard)]
    mode: EvalMode,
    /// Sigmoid half-width for soft mode.
    #[arg(long, default_value_t = 0.5)]
    t: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Hard,
    Soft,
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    which: BenchCommand,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Per-configuration cost rows for single-CT-layer networks.
    Cost(BenchCostArgs),
    /// Complexity-ratio rows (exact form and asymptote).
    Ratio(BenchRatioArgs),
}

#[derive(Args)]
struct BenchCostArgs {
    /// Patch sizes to sweep.
    #[arg(long, default_value = "3,5,7,9")]
    l: String,
    /// Bit counts to sweep.
    #[arg(long, default_value = "8")]
    k: String,
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Representation width (input depth = output depth).
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Input spatial extent.
    #[arg(long, default_value_t = 32)]
    input: usize,
    #[arg(long, default_value_t = DEFAULT_C_B)]
    c_b: u64,
    /// Also time hard-mode inference.
    #[arg(long)]
    wall: bool,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchRatioArgs {
    #[arg(long, default_value = "3,5,7,9")]
    l: String,
    #[arg(long, default_value = "8")]
    k: String,
    /// Channel reuse factors.
    #[arg(long, default_value = "2")]
    r: String,
    #[arg(long, default_value = "512")]
    d: String,
    #[arg(long, default_value_t = 10.0)]
    c_b: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    /// Largest K checked against every labeling; beyond it, random
    /// labelings are sampled.
    #[arg(long, default_value_t = 4)]
    exhaustive_max: usize,
    /// Random labelings per fern above the exhaustive budget.
    #[arg(long, default_value_t = 1000)]
    labelings: usize,
    /// Rectangle-network instances per dimension.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Rectangles per instance (upper bound).
    #[arg(long, default_value_t = 3)]
    rects: usize,
    /// Dimensions to test, comma separated.
    #[arg(long, default_value = "1,2,3")]
    dims: String,
    /// Membership probes per rectangle instance.
    #[arg(long, default_value_t = 10000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Table precision of the output container.
    #[arg(long, value_enum, default_value_t = ExportFormat::F32)]
    format: ExportFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    F32,
    I8,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|part| part.trim().parse::<T>().map_err(|_| format!("invalid {what} entry '{part}'")))
        .collect()
}

fn resolve_arch(arch: &str) -> Result<NetworkSpec, String> {
    match arch {
        "mnist-2" => Ok(NetworkSpec::two_layer_mnist()),
        "cifar10-4" => Ok(NetworkSpec::four_layer_cifar10()),
        "cifar10-6" => Ok(NetworkSpec::six_layer_cifar10()),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading architecture config {path}: {e}"))?;
            NetworkSpec::parse_config(&text).map_err(|e| format!("parsing architecture config {path}: {e}"))
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode, String> {
    let spec = resolve_arch(&args.arch)?;
    let train = args.data.load("loading training data")?;
    let val = match (&args.val_images, &args.val_labels) {
        (Some(images), labels) => {
            let data = DataArgs {
                dataset: args.data.dataset,
                images: images.clone(),
                labels: labels.clone(),
                limit: args.val_limit,
            };
            Some(data.load("loading validation data")?)
        }
        (None, _) => None,
    };
    let teacher = match &args.teacher_logits {
        Some(path) => Some(
            load_teacher_logits(path, spec.classes)
                .map_err(|e| format!("loading teacher logits {}: {e}", path.display()))?,
        ),
        None => None,
    };

    let epochs: Vec<usize> = parse_list(&args.epochs, "--epochs")?;
    if epochs.len() != 3 {
        return Err("--epochs takes three comma-separated phase lengths".into());
    }
    let config = TrainConfig {
        sgd: SgdConfig { learning_rate: args.lr, momentum: args.momentum, batch_size: args.batch },
        anneal: AnnealSchedule {
            f0: args.f0,
            decay: args.decay,
            recalib_period: args.recalib,
            f_floor: args.f_floor,
        },
        phases: PhasePlan { phase1: epochs[0], phase2: epochs[1], phase3: epochs[2] },
        distill: if teacher.is_some() {
            Some(
                DistillConfig::new(args.alpha, args.temp, args.temp_end)
                    .map_err(|e| format!("distillation flags: {e}"))?,
            )
        } else {
            None
        },
        initial_t: args.t0,
        chain_clip: args.clip,
        prune_eps: 1e-8,
        calibration_examples: args.calibration,
        seed: args.seed,
        verbose: !args.quiet,
    };

    let mut net = Network::build(&spec, args.seed).map_err(|e| format!("building network: {e}"))?;
    if !args.quiet {
        eprintln!("{}", EpochMetrics::csv_header());
    }
    let metrics = train_three_phase(
        &mut net,
        &train.images,
        &train.labels,
        val.as_ref().map(|v| (v.images.as_slice(), v.labels.as_slice())),
        teacher.as_ref(),
        &config,
    )
    .map_err(|e| format!("training: {e}"))?;

    std::fs::write(&args.out_model, save_model(&net))
        .map_err(|e| format!("writing model {}: {e}", args.out_model.display()))?;
    if let Some(path) = &args.metrics {
        let mut csv = String::from(EpochMetrics::csv_header());
        csv.push('\n');
        for row in &metrics {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        std::fs::write(path, csv).map_err(|e| format!("writing metrics {}: {e}", path.display()))?;
    }
    if let Some(last) = metrics.last() {
        println!(
            "trained {} epochs; final train_err {:.4}{}",
            metrics.len(),
            last.train_err,
            last.val_err.map(|v| format!(", val_err {v:.4}")).unwrap_or_default()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode, String> {
    let bytes = std::fs::read(&args.model).map_err(|e| format!("reading model {}: {e}", args.model.display()))?;
    let net = load_model(&bytes).map_err(|e| format!("loading model {}: {e}", args.model.display()))?;
    let data = args.data.load("loading evaluation data")?;
    let mode = match args.mode {
        EvalMode::Hard => ForwardMode::Hard,
        EvalMode::Soft => ForwardMode::Soft(
            SoftConfig::new(args.t, 1e-8).map_err(|e| format!("soft mode flags: {e}"))?,
        ),
    };
    let err = net
        .evaluate(&data.images, &data.labels, mode)
        .map_err(|e| format!("evaluating: {e}"))?;
    println!("error rate: {err:.6} ({} examples)", data.len());
    Ok(ExitCode::SUCCESS)
}

fn bench_cost(args: &BenchCostArgs) -> Result<ExitCode, String> {
    let ls: Vec<usize> = parse_list(&args.l, "--l")?;
    let ks: Vec<usize> = parse_list(&args.k, "--k")?;
    println!("config,ops_cnn,ops_ct,ratio,params,bytes,median_ns");
    for &l in &ls {
        for &k in &ks {
            let extent = args.input;
            let spec = NetworkSpec {
                input: (extent, extent, args.d),
                layers: vec![
                    LayerSpec::ct(l, k, args.m, args.d),
                    LayerSpec::avg_pool(extent - l + 1),
                    LayerSpec::Softmax,
                ],
                classes: args.d,
            };
            let net = Network::build(&spec, args.seed)
                .map_err(|e| format!("building l={l} k={k} bench network: {e}"))?;
            let report = net.cost(args.c_b);
            let median = if args.wall {
                format!("{:.1}", wall_bench(&net, args.reps.max(3), args.seed).median_ns_per_location)
            } else {
                String::new()
            };
            println!(
                "l{}_k{}_m{}_d{},{},{},{:.4},{},{},{}",
                l, k, args.m, args.d, report.ops_cnn, report.ops_ct, report.ratio, report.params,
                report.bytes_f32, median
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_ratio(args: &BenchRatioArgs) -> Result<ExitCode, String> {
    let ls: Vec<f64> = parse_list(&args.l, "--l")?;
    let ks: Vec<f64> = parse_list(&args.k, "--k")?;
    let rs: Vec<f64> = parse_list(&args.r, "--r")?;
    let ds: Vec<f64> = parse_list(&args.d, "--d")?;
    println!("l,k,r,d,c_b,exact,asymptotic");
    for &l in &ls {
        for &k in &ks {
            for &r in &rs {
                for &d in &ds {
                    let s = speedup_ratio(l, k, r, d, args.c_b);
                    println!("{l},{k},{r},{d},{},{:.4},{:.4}", args.c_b, s.exact, s.asymptotic);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode, String> {
    let mut all_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    for k in args.k_min..=args.k_max {
        let instance = build_shatter_instance(k).map_err(|e| format!("shatter instance K={k}: {e}"))?;
        let n = instance.sample.len();
        let (ok, detail) = if k <= args.exhaustive_max {
            let ok = verify_shatter(&instance.fern, &instance.sample, 0..(1u64 << n));
            (ok, format!("exhaustive {} labelings", 1u64 << n))
        } else {
            let mask = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
            let labelings: Vec<u64> = (0..args.labelings).map(|_| rng.gen::<u64>() & mask).collect();
            let ok = verify_shatter(&instance.fern, &instance.sample, labelings);
            (ok, format!("{} random labelings", args.labelings))
        };
        all_ok &= ok;
        println!("shatter K={k} ({n} points, {detail}): {}", if ok { "PASS" } else { "FAIL" });
    }

    let dims: Vec<usize> = parse_list(&args.dims, "--dims")?;
    for &d in &dims {
        for instance_no in 0..args.instances {
            let count = rng.gen_range(1..=args.rects.max(1));
            let rects: Vec<RectangleSpec> = (0..count)
                .map(|_| {
                    let mut lo = Vec::with_capacity(d);
                    let mut hi = Vec::with_capacity(d);
                    for _ in 0..d {
                        let a: f64 = rng.gen_range(0.0..0.9);
                        let b: f64 = rng.gen_range(a..1.0);
                        lo.push(a);
                        hi.push(b);
                    }
                    RectangleSpec { lo, hi, value: rng.gen_range(-2.0..2.0) }
                })
                .collect();
            let net = build_rectangle_network(&rects, d)
                .map_err(|e| format!("rectangle network d={d} instance {instance_no}: {e}"))?;
            let mut ok = true;
            let mut checked = 0usize;
            while checked < args.points {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                if rects.iter().any(|r| r.boundary_distance(&x) < 1e-9) {
                    continue; // exactness is only claimed off boundaries
                }
                let expect: f64 = rects.iter().filter(|r| r.contains(&x)).map(|r| r.value).sum();
                if net.evaluate(&x) != expect {
                    ok = false;
                    break;
                }
                checked += 1;
            }
            all_ok &= ok;
            println!(
                "rectangle d={d} instance {instance_no} (P={count}, {} points): {}",
                args.points,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }

    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_export(args: &ExportArgs) -> Result<ExitCode, String> {
    let bytes = std::fs::read(&args.model).map_err(|e| format!("reading model {}: {e}", args.model.display()))?;
    let net = load_model(&bytes).map_err(|e| format!("loading model {}: {e}", args.model.display()))?;
    let out = match args.format {
        ExportFormat::F32 => save_model(&net),
        ExportFormat::I8 => save_model_i8(&net),
    };
    std::fs::write(&args.out, &out).map_err(|e| format!("writing {}: {e}", args.out.display()))?;
    println!("wrote {} bytes to {}", out.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    #[cfg(feature = "parallel")]
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global()
            .map_err(|e| format!("configuring {workers} workers: {e}"))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.workers;

    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => match &args.which {
            BenchCommand::Cost(c) => bench_cost(c),
            BenchCommand::Ratio(r) => bench_ratio(r),
        },
        Command::Verify(args) => cmd_verify(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
