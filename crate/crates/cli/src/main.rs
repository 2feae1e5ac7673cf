//! `binquant` command line: quantize raw tensors into packed models,
//! verify and size them, run the QAT experiments and the kernel benchmark.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use binquant::harness::{self, ExpId, ExperimentConfig};
use binquant::kernels;
use binquant::modelpack::{
    self, read_raw_tensors, size_report, verify_model, write_model, MetaDtype, ModelManifest,
    PackedModel, StoredQuant, TensorPayload,
};
use binquant::quant::{self, QuantScheme};

#[derive(Parser)]
#[command(
    name = "binquant",
    version,
    about = "Weights-only 1/2-bit quantization toolkit",
    propagate_version = true
)]
struct Cli {
    /// Seed for all randomized work.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Optional TOML config file with experiment overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an RTW0 raw-tensor file into a packed BQW1 model.
    Quantize(QuantizeArgs),
    /// Print a per-layer size report for a manifest.
    SizeReport(SizeReportArgs),
    /// Run a QAT experiment (E0..E5) on the synthetic task.
    Train(TrainArgs),
    /// Check a BQW1 file structurally, including its checksum.
    Verify(VerifyArgs),
    /// Compare the dense f32 matmul against the packed kernel.
    Bench(BenchArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input RTW0 file of 2-D f32 weight tensors.
    #[arg(long = "in")]
    input: PathBuf,
    /// Scheme name: e1..e5, absmean1, absmax1/asym1, absmax2/asym2.
    #[arg(long)]
    scheme: String,
    /// Sub-channel block size; overrides the scheme's grouping.
    #[arg(long)]
    block: Option<usize>,
    /// Static clip fraction in (0, 1].
    #[arg(long)]
    clip: Option<f32>,
    /// Scale/zero-point storage: f32 or int8.
    #[arg(long, default_value = "f32")]
    meta: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SizeReportArgs {
    /// Manifest JSON file.
    #[arg(long)]
    manifest: PathBuf,
    /// Scale/zero-point storage: f32 or int8.
    #[arg(long, default_value = "f32")]
    meta: String,
    /// Also write the per-layer CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment id (E0..E5), a comma list, or `all`.
    #[arg(long)]
    exp: String,
    /// Override the baseline step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Write the results CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    file: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated MxKxN sizes, e.g. `64x64x64,128x256x128`.
    #[arg(long, default_value = "64x64x64,128x128x128,256x256x256")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Scheme to pack the weight operand with.
    #[arg(long, default_value = "e5")]
    scheme: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Optional config-file overrides for the train subcommand.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    train: TrainOverrides,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    base_steps: Option<usize>,
    hidden: Option<usize>,
    blocks: Option<usize>,
    classes: Option<usize>,
    seq_len: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    train_examples: Option<usize>,
    eval_examples: Option<usize>,
    scale_backprop: Option<bool>,
}

fn main() {
    let cli = Cli::parse();
    init_thread_pool();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// `BINQUANT_THREADS` caps the rayon pool used by the kernels.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("BINQUANT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file_config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Quantize(args) => quantize_cmd(&args),
        Command::SizeReport(args) => size_report_cmd(&args),
        Command::Train(args) => train_cmd(&args, cli.seed, &file_config),
        Command::Verify(args) => verify_cmd(&args),
        Command::Bench(args) => bench_cmd(&args, cli.seed),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

fn parse_scheme(
    name: &str,
    block: Option<usize>,
    clip: Option<f32>,
) -> anyhow::Result<QuantScheme> {
    let mut scheme = QuantScheme::parse(name)?;
    if let Some(b) = block {
        scheme = scheme.with_block(b);
    }
    if let Some(c) = clip {
        scheme = scheme.with_clip(c);
    }
    scheme.validate()?;
    Ok(scheme)
}

fn quantize_cmd(args: &QuantizeArgs) -> anyhow::Result<()> {
    let scheme = parse_scheme(&args.scheme, args.block, args.clip)?;
    let meta = MetaDtype::parse(&args.meta)?;
    let tensors = read_raw_tensors(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    if tensors.is_empty() {
        bail!("input file contains no tensors");
    }

    let mut packed = Vec::with_capacity(tensors.len());
    let mut layer_specs = Vec::with_capacity(tensors.len());
    println!(
        "{:<24} {:>10} {:>14} {:>12}",
        "tensor", "params", "mse", "codes_bytes"
    );
    for t in &tensors {
        let [rows, cols] = t.shape[..] else {
            bail!(
                "tensor `{}` has shape {:?}; the quantizer takes 2-D matrices",
                t.name,
                t.shape
            );
        };
        let q = quant::quantize(&t.data, (rows, cols), &scheme)
            .with_context(|| format!("quantizing `{}`", t.name))?;
        let mse = quant::quant_mse(&t.data, (rows, cols), &scheme)?;
        let stored = StoredQuant::from_quantized(&q, meta)?;
        println!(
            "{:<24} {:>10} {:>14.6e} {:>12}",
            t.name,
            rows * cols,
            mse,
            stored.codes.bytes.len()
        );
        layer_specs.push(modelpack::LayerSpec::quantized(
            t.name.clone(),
            t.shape.clone(),
            scheme,
        ));
        packed.push((t.name.clone(), TensorPayload::Quantized(stored)));
    }

    let model = PackedModel {
        meta_dtype: meta,
        tensors: packed,
    };
    write_model(&args.out, &model).with_context(|| format!("writing {}", args.out.display()))?;

    let manifest = ModelManifest::new(layer_specs)?;
    let report = size_report(&manifest, meta)?;
    println!(
        "packed {} tensors under {scheme} ({} meta): {} bits total, {:.2}x smaller than f32",
        manifest.layers.len(),
        meta.label(),
        report.total_bits_quantized,
        report.reduction_factor
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn size_report_cmd(args: &SizeReportArgs) -> anyhow::Result<()> {
    let meta = MetaDtype::parse(&args.meta)?;
    let manifest = ModelManifest::from_json_file(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let report = size_report(&manifest, meta)?;
    print!("{}", report.to_table());
    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, report.to_csv())
            .with_context(|| format!("writing {}", csv_path.display()))?;
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs, seed: u64, file_config: &FileConfig) -> anyhow::Result<()> {
    let exps: Vec<ExpId> = if args.exp.eq_ignore_ascii_case("all") {
        ExpId::ALL.to_vec()
    } else {
        args.exp
            .split(',')
            .map(|s| ExpId::parse(s.trim()))
            .collect::<Result<_, _>>()?
    };

    let mut reports = Vec::with_capacity(exps.len());
    for exp in exps {
        let mut cfg = ExperimentConfig::new(exp, seed);
        apply_overrides(&mut cfg, &file_config.train);
        if let Some(steps) = args.steps {
            cfg.base_steps = steps;
        }
        let report = harness::run_experiment(&cfg)?;
        println!(
            "{} finished: loss {:.6}, accuracy {:.4}, diverged {}, {:.1}s",
            report.exp.label(),
            report.final_loss,
            report.eval_acc,
            report.diverged,
            report.wall_time_s
        );
        reports.push(report);
    }

    print!("{}", harness::report_table(&reports));
    if let Some(out) = &args.out {
        std::fs::write(out, harness::report_csv(&reports))
            .with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) {
    if let Some(v) = o.base_steps {
        cfg.base_steps = v;
    }
    if let Some(v) = o.hidden {
        cfg.dims.hidden = v;
    }
    if let Some(v) = o.blocks {
        cfg.dims.blocks = v;
    }
    if let Some(v) = o.classes {
        cfg.dims.classes = v;
    }
    if let Some(v) = o.seq_len {
        cfg.dims.seq_len = v;
    }
    if let Some(v) = o.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = o.batch {
        cfg.optim.batch = v;
    }
    if let Some(v) = o.train_examples {
        cfg.train_examples = v;
    }
    if let Some(v) = o.eval_examples {
        cfg.eval_examples = v;
    }
    if let Some(v) = o.scale_backprop {
        cfg.scale_backprop = v;
    }
}

fn verify_cmd(args: &VerifyArgs) -> anyhow::Result<()> {
    match verify_model(&args.file) {
        Ok(summary) => {
            println!(
                "OK: {} ({} tensors, {} quantized, {} meta, {} bytes)",
                args.file.display(),
                summary.tensor_count,
                summary.quantized_tensors,
                summary.meta_dtype.label(),
                summary.file_bytes
            );
            Ok(())
        }
        Err(e) => {
            println!("FAIL: {} ({e})", args.file.display());
            std::process::exit(1);
        }
    }
}

fn bench_cmd(args: &BenchArgs, seed: u64) -> anyhow::Result<()> {
    let scheme = QuantScheme::parse(&args.scheme)?;
    let sizes = parse_sizes(&args.sizes)?;
    let rows = kernels::bench_matmul(&sizes, args.reps, &scheme, seed)?;
    let csv = kernels::bench_csv(&rows);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_sizes(spec: &str) -> anyhow::Result<Vec<(usize, usize, usize)>> {
    let mut sizes = Vec::new();
    for part in spec.split(',') {
        let dims: Vec<usize> = part
            .trim()
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad size `{part}`; expected MxKxN"))?;
        let [m, k, n] = dims[..] else {
            bail!("bad size `{part}`; expected MxKxN");
        };
        if m == 0 || k == 0 || n == 0 {
            bail!("bad size `{part}`; dimensions must be positive");
        }
        sizes.push((m, k, n));
    }
    if sizes.is_empty() {
        bail!("no sizes given");
    }
    Ok(sizes)
}
