//! `cgn`: dataset synthesis, preprocessing, training, evaluation, ablation,
//! causal-model verification, distribution reports and figures.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cgn_core::metrics::symmetric_prior_experiment;
use cgn_core::plot::{plot_cam_overlays, plot_feature_heatmaps, plot_training_progression};
use cgn_core::preprocess::{preprocess_dir, TARGET_SIZE};
use cgn_core::scm::ScmSpec;
use cgn_core::synth::{generate_dataset, Manifest, Split, SynthConfig};
use cgn_core::trainer::{
    cross_validate, evaluate, localization_table, run_ablation, train, write_localization_csv, TrainConfig, Variant,
};
use cgn_core::{CgnError, Scalar};

/// Default root for outputs whose directory is not given explicitly.
const OUTPUT_ROOT_VAR: &str = "CGN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "cgn",
    version,
    about = "Bilateral counterfactual generation toolkit",
    arg_required_else_help = true
)]
struct Cli {
    /// Root for default output directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR, default_value = "runs")]
    output_root: PathBuf,
    /// Floating-point type for networks.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bilateral dataset.
    Synth(SynthArgs),
    /// Segment, crop and resize a directory of PNG or raw 14-bit images.
    Preprocess(PreprocessArgs),
    /// Train one model and select the best checkpoint on validation.
    Train(TrainArgs),
    /// Evaluate a trained run; prints one record per split.
    Eval(EvalArgs),
    /// Train a grid of variants and seeds and write ablation.csv.
    Ablate(AblateArgs),
    /// Check the counterfactual identities of a causal-model spec.
    VerifyScm(VerifyArgs),
    /// Feature distances of a run plus the symmetric-prior test.
    FidReport(FidArgs),
    /// Render figures for a trained run.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TARGET_SIZE)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory holding manifest.csv.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run patient-wise k-fold cross-validation instead of one split.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to every split.
    #[arg(long)]
    split: Option<Split>,
    /// Dataset override; defaults to the one the run was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write per-sample test-split boxes to this CSV.
    #[arg(long)]
    localization: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variants; defaults to all.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

#[derive(Args)]
struct FidArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Healthy and unhealthy couples for the prior test.
    #[arg(long, default_value_t = 100)]
    couples: usize,
    /// Generator settings for the prior-test couples.
    #[arg(long)]
    synth_config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Features,
    Progression,
    CamOverlay,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Epoch cadence of progression snapshots.
    #[arg(long, default_value_t = 10)]
    every: usize,
    /// Defaults to `<run>/plots/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `key=value` pairs on one line.
fn record(fields: &[(&str, &dyn Display)]) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run<T: Scalar>(cli: &Cli) -> cgn_core::Result<ExitCode> {
    let root = &cli.output_root;
    match &cli.command {
        Command::Synth(a) => synth(a, root),
        Command::Preprocess(a) => {
            let written = preprocess_dir(&a.input, &a.out, a.size)?;
            println!("{}", record(&[("images", &written.len()), ("out", &a.out.display())]));
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(a) => train_cmd::<T>(a, root),
        Command::Eval(a) => eval_cmd::<T>(a),
        Command::Ablate(a) => ablate::<T>(a, root),
        Command::VerifyScm(a) => {
            let report = ScmSpec::load(&a.spec)?.verify_theorem1(a.tolerance)?;
            println!(
                "{}",
                record(&[
                    ("tv_eq2", &report.tv_eq2),
                    ("tv_eq3", &report.tv_eq3),
                    ("evidence_checked", &report.evidence_checked),
                    ("pass", &report.pass),
                ])
            );
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::FidReport(a) => fid_report::<T>(a),
        Command::Plot(a) => {
            let out = a.out.clone().unwrap_or_else(|| {
                let kind = a.kind.to_possible_value().expect("no skipped variants");
                a.run.join("plots").join(kind.get_name())
            });
            let written = match a.kind {
                PlotKind::Features => plot_feature_heatmaps(&a.run, &out)?,
                PlotKind::Progression => plot_training_progression(&a.run, a.every, &out)?,
                PlotKind::CamOverlay => plot_cam_overlays::<T>(&a.run, &out)?,
            };
            println!("{}", record(&[("images", &written.len()), ("out", &out.display())]));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn synth(a: &SynthArgs, root: &Path) -> cgn_core::Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n_samples = n;
    }
    if let Some(s) = a.size {
        cfg.image_size = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = a.out.clone().unwrap_or_else(|| root.join("data"));
    let manifest = generate_dataset(&cfg, &out)?;
    let count = |s| manifest.split(s).len();
    println!(
        "{}",
        record(&[
            ("samples", &manifest.entries.len()),
            ("train", &count(Split::Train)),
            ("val", &count(Split::Val)),
            ("test", &count(Split::Test)),
            ("out", &out.display()),
        ])
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd<T: Scalar>(a: &TrainArgs, root: &Path) -> cgn_core::Result<ExitCode> {
    let cfg = TrainConfig::load(&a.config)?;
    let manifest = Manifest::load(&a.dataset)?;
    if let Some(k) = a.folds {
        let cv = cross_validate::<T>(&cfg, &manifest, k)?;
        let folds = cv.fold_aucs.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        println!(
            "{}",
            record(&[("folds", &k), ("fold_aucs", &folds), ("mean_auc", &cv.mean_auc)])
        );
        return Ok(ExitCode::SUCCESS);
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("{}-seed{}", cfg.variant, cfg.seed)));
    let rec = train::<T>(&cfg, &manifest, Some(&out))?;
    println!(
        "{}",
        record(&[
            ("variant", &rec.variant),
            ("seed", &rec.seed),
            ("best_epoch", &rec.best_epoch),
            ("best_val_auc", &rec.best_val_auc),
            ("test_auc", &rec.test.auc),
            ("test_localization_error", &rec.test.localization_error),
            ("run", &out.display()),
        ])
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> cgn_core::Result<ExitCode> {
    let splits = match a.split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val, Split::Test],
    };
    for s in splits {
        let m = evaluate::<T>(&a.run, s, a.dataset.as_deref())?;
        let fid = m.fid;
        println!(
            "{}",
            record(&[
                ("split", &m.split),
                ("n", &m.n),
                ("auc", &m.auc),
                ("localization_error", &m.localization_error),
                ("omega_inside", &m.omega_inside),
                ("omega_outside", &m.omega_outside),
                ("fid_target_reference", &opt(fid.map(|f| f.target_reference))),
                (
                    "fid_counterfactual_reference",
                    &opt(fid.map(|f| f.counterfactual_reference))
                ),
                ("fid_target_counterfactual", &opt(fid.map(|f| f.target_counterfactual))),
                (
                    "fid_target_counterfactual_lesion_free",
                    &opt(fid.and_then(|f| f.target_counterfactual_lesion_free)),
                ),
            ])
        );
    }
    if let Some(path) = &a.localization {
        let rows = localization_table::<T>(&a.run, Split::Test, a.dataset.as_deref())?;
        write_localization_csv(path, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate<T: Scalar>(a: &AblateArgs, root: &Path) -> cgn_core::Result<ExitCode> {
    let cfg = TrainConfig::load(&a.config)?;
    let manifest = Manifest::load(&a.dataset)?;
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let out = a.out.clone().unwrap_or_else(|| root.join("ablation"));
    let (rows, _) = run_ablation::<T>(&cfg, &manifest, &variants, &a.seeds, Some(&out))?;
    for r in &rows {
        println!(
            "{}",
            record(&[
                ("variant", &r.variant),
                ("median_auc", &r.median_auc),
                ("status", &r.status)
            ])
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn fid_report<T: Scalar>(a: &FidArgs) -> cgn_core::Result<ExitCode> {
    let m = evaluate::<T>(&a.run, a.split, None)?;
    let q = m
        .fid
        .ok_or_else(|| CgnError::Precondition("run has no counterfactual features".into()))?;
    let synth = match &a.synth_config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let prior = symmetric_prior_experiment(&synth, a.couples, a.couples)?;
    println!(
        "{}",
        record(&[
            ("split", &m.split),
            ("target_reference", &q.target_reference),
            ("counterfactual_reference", &q.counterfactual_reference),
            ("target_counterfactual", &q.target_counterfactual),
            (
                "target_counterfactual_lesion_free",
                &opt(q.target_counterfactual_lesion_free)
            ),
            ("prior_t", &prior.welch.t),
            ("prior_df", &prior.welch.df),
            ("prior_p_value", &prior.welch.p_value),
        ])
    );
    Ok(ExitCode::SUCCESS)
}
