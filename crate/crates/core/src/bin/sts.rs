use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sts_core::bench::{evaluate, run_all, Method};
use sts_core::error::{Result, StsError};
use sts_core::spectral::{energy_curve, energy_curve_csv, select_rank, thin_svd, RankSpec};
use sts_core::storage::{load_manifest, read_bundle, read_bundle_header, summarize, write_json, write_results};
use sts_core::synth::{synthesize, SynthSpec};
use sts_core::{AdaptConfig, CoefficientMode, Dataset, OptimizerConfig};

#[derive(Parser)]
#[command(name = "sts", version, about = "Spectral test-time steering of zero-shot prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the steering rank and print the energy curve.
    Rank(RankArgs),
    /// Adapt every sample of a manifest and write JSON-lines results.
    Adapt(AdaptArgs),
    /// Compare methods on a labelled manifest.
    Bench(BenchArgs),
    /// Write a synthetic planted-shift dataset.
    Synth(SynthArgs),
    /// Validate a bundle or manifest and print its spectrum.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RankArg {
    Gd,
    Energy,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shared,
    PerClass,
}

#[derive(Args)]
struct RankOpts {
    #[arg(long, value_enum, default_value = "gd")]
    rank: RankArg,
    /// Energy fraction for `--rank energy`.
    #[arg(long, default_value_t = 0.98)]
    energy: f64,
    /// Rank for `--rank fixed`.
    #[arg(long)]
    k: Option<usize>,
    /// Mean-centre prototypes before the SVD.
    #[arg(long)]
    center: bool,
}

impl RankOpts {
    fn spec(&self) -> Result<RankSpec> {
        Ok(match self.rank {
            RankArg::Gd => RankSpec::GavishDonoho,
            RankArg::Energy => RankSpec::Energy { fraction: self.energy },
            RankArg::Fixed => RankSpec::Fixed {
                k: self
                    .k
                    .ok_or_else(|| StsError::InvalidParameter { name: "k", reason: "`--rank fixed` needs `--k`".into() })?,
            },
        })
    }
}

#[derive(Args)]
struct AdaptOpts {
    #[command(flatten)]
    rank: RankOpts,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_reg: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value = "shared")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the manifest's logit scale.
    #[arg(long)]
    logit_scale: Option<f64>,
    /// Also score the unaugmented view when filtering dropped it.
    #[arg(long)]
    include_original: bool,
    /// Re-filter views with the current prototypes before each step.
    #[arg(long)]
    refilter: bool,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl AdaptOpts {
    fn config(&self) -> Result<AdaptConfig> {
        let cfg = AdaptConfig {
            rho: self.rho,
            lambda_reg: self.lambda_reg,
            mode: match self.mode {
                ModeArg::Shared => CoefficientMode::Shared,
                ModeArg::PerClass => CoefficientMode::PerClass,
            },
            rank: self.rank.spec()?,
            center: self.rank.center,
            optimizer: OptimizerConfig {
                lr: self.lr,
                steps: self.steps,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            logit_scale_override: self.logit_scale,
            seed: self.seed,
            include_original: self.include_original,
            refilter_each_step: self.refilter,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RankArgs {
    /// Manifest or prototype bundle.
    input: PathBuf,
    #[command(flatten)]
    rank: RankOpts,
    /// Write the energy curve CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    opts: AdaptOpts,
}

#[derive(Args)]
struct BenchArgs {
    manifest: PathBuf,
    /// Comma-separated subset of zeroshot, tps, sts-shared, sts-perclass.
    #[arg(long, value_delimiter = ',', default_value = "zeroshot,tps,sts-shared,sts-perclass")]
    methods: Vec<String>,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write per-method JSON-lines results into this directory.
    #[arg(long)]
    results_dir: Option<PathBuf>,
    #[command(flatten)]
    opts: AdaptOpts,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    views: usize,
    #[arg(long, default_value_t = 10)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0.4)]
    shift: f64,
    /// Plant the shift orthogonal to the steering subspace.
    #[arg(long)]
    complement: bool,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    #[command(flatten)]
    rank: RankOpts,
}

#[derive(Args)]
struct InspectArgs {
    /// A `.stse` bundle or a manifest.
    input: PathBuf,
}

fn is_bundle(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "stse")
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn prototype_matrix(input: &Path) -> Result<nalgebra::DMatrix<f64>> {
    if is_bundle(input) {
        read_bundle(input)
    } else {
        Ok(load_manifest(input)?.load_prototypes()?.z().clone())
    }
}

fn cmd_rank(args: &RankArgs) -> Result<()> {
    let mut z = prototype_matrix(&args.input)?;
    if args.rank.center {
        z = sts_core::spectral::center_rows(&z);
    }
    let f = thin_svd(&z)?;
    let sel = select_rank(&args.rank.spec()?, &f.s, z.nrows(), z.ncols())?;
    let csv = energy_curve_csv(&energy_curve(&f.s)?);
    match &args.csv {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| StsError::Io { path: p.clone(), source: e })?;
            print_json(&json!({ "selection": sel, "singular_values": f.s }))
        }
        None => {
            eprintln!("{}", serde_json::to_string(&sel)?);
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let cfg = args.opts.config()?;
    let dataset = Dataset::open(&args.manifest)?;
    let basis = cfg.build_basis(&dataset.prototypes)?;
    let results = run_all(&dataset, &basis, &cfg, args.opts.workers)?;
    write_results(&results, &args.out)?;
    let summary = summarize(&results, &cfg, Some(basis.selection.clone()));
    let summary_path = args.summary.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".summary.json");
        PathBuf::from(p)
    });
    write_json(&summary, &summary_path)?;
    print_json(&serde_json::to_value(&summary)?)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.opts.config()?;
    let methods = args.methods.iter().map(|m| m.trim().parse()).collect::<Result<Vec<Method>>>()?;
    let dataset = Dataset::open(&args.manifest)?;
    let out = evaluate(&dataset, &methods, &cfg, args.opts.workers)?;
    if let Some(p) = &args.json {
        write_json(&out.report, p)?;
    }
    if let Some(dir) = &args.results_dir {
        for (m, results) in &out.results {
            write_results(results, &dir.join(format!("{m}.jsonl")))?;
        }
    }
    print!("{}", out.report.to_table());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        dim: args.dim,
        views_per_sample: args.views,
        samples_per_class: args.samples_per_class,
        shift_magnitude: args.shift,
        shift_in_basis: !args.complement,
        noise_scale: args.noise,
        seed: args.seed,
        rank: args.rank.spec()?,
        logit_scale: args.logit_scale,
    };
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    let (data, _) = synthesize(&spec, &args.out)?;
    print_json(&json!({
        "manifest": args.out.join("manifest.json"),
        "samples": data.dataset.samples.len(),
        "k_t": data.basis.k_t(),
        "fingerprint": data.dataset.fingerprint(),
    }))
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    if is_bundle(&args.input) {
        let header = read_bundle_header(&args.input)?;
        let m = read_bundle(&args.input)?;
        let norms: Vec<f64> = m.row_iter().map(|r| r.norm()).collect();
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let s = if m.nrows() >= 2 && m.ncols() >= 2 { Some(thin_svd(&m)?.s) } else { None };
        return print_json(&json!({
            "rows": header.rows,
            "cols": header.cols,
            "dtype": "f32",
            "row_norm_min": min,
            "row_norm_max": max,
            "singular_values": s,
        }));
    }
    let manifest = load_manifest(&args.input)?;
    let proto = manifest.load_prototypes()?;
    let f = thin_svd(proto.z())?;
    let gd = select_rank(&RankSpec::GavishDonoho, &f.s, proto.num_classes(), proto.dim())?;
    let en = select_rank(&RankSpec::Energy { fraction: 0.98 }, &f.s, proto.num_classes(), proto.dim())?;
    let labelled = manifest.samples.iter().filter(|s| s.label.is_some()).count();
    print_json(&json!({
        "schema_version": manifest.schema_version,
        "num_classes": proto.num_classes(),
        "dim": proto.dim(),
        "templates": manifest.templates.len(),
        "logit_scale": proto.logit_scale(),
        "samples": manifest.samples.len(),
        "labelled": labelled,
        "singular_values": f.s,
        "gavish_donoho": gd,
        "energy_0_98": en,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Rank(a) => cmd_rank(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
