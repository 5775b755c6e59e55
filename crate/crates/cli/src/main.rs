use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde::Serialize;

use eigenpatch::ensemble::{classify_subject, load_model, save_model, train_ensemble, EnsembleConfig, FeatureMode};
use eigenpatch::error::{Error, Result};
use eigenpatch::evaluation::{audit_leakage, loo_sweep, write_reports, Cohort, LooConfig, RunSpec};
use eigenpatch::kernel::KernelSpec;
use eigenpatch::kpca::KpcaKernel;
use eigenpatch::phantom::{generate_cohort, CohortManifest, PhantomSpec};
use eigenpatch::preprocess::{load_preprocessed, prepare_raw, preprocess_cohort, registered_mean, write_preprocessed, PreprocessConfig};
use eigenpatch::registration::RegistrationConfig;
use eigenpatch::segmentation::LungMask;
use eigenpatch::svm::{ClassWeighting, SvmConfig};
use eigenpatch::uncertainty::BootstrapConfig;
use eigenpatch::volume::{load_volume, Volume3};

const TABLE_SIDES: [usize; 7] = [24, 28, 32, 42, 48, 56, 64];

#[derive(Parser)]
#[command(name = "eigenpatch", version, about = "Patch-wise kernel PCA and SVM ensembles for 3D chest volumes")]
struct Cli {
    /// Worker threads; defaults to the number of cores. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom cohort.
    Generate(GenerateArgs),
    /// Segment, register to a cohort-mean template and standardize a cohort.
    Preprocess(PreprocessArgs),
    /// Train a patch ensemble on a preprocessed cohort.
    Train(TrainArgs),
    /// Classify preprocessed subjects with a trained ensemble.
    Classify(ClassifyArgs),
    /// Leave-one-out evaluation for one or more patch sides.
    Evaluate(EvaluateArgs),
    /// Leave-one-out patch-size sweep over the default side list plus the VAF baseline.
    Sweep(EvaluateArgs),
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long, default_value_t = 20)]
    controls: usize,
    #[arg(long, default_value_t = 80)]
    diseased: usize,
    /// Side of the cubic volume grid.
    #[arg(long, default_value_t = 128)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of diseased subjects with a single focal lesion cluster.
    #[arg(long)]
    focal_fraction: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Patch sides for which lesion patch ids are recorded.
    #[arg(long, value_delimiter = ',')]
    patch_sides: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct PreprocessOpts {
    /// Downsampling target (cube side); 0 keeps the stored grid.
    #[arg(long, default_value_t = 128)]
    dims: usize,
    #[arg(long, default_value_t = 2)]
    template_rounds: usize,
    #[arg(long, default_value_t = 400)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0.05)]
    init_step: f64,
    /// Registration cost lattice stride in voxels.
    #[arg(long, default_value_t = 4)]
    sample_stride: usize,
}

impl PreprocessOpts {
    fn config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_dims: (self.dims > 0).then_some([self.dims; 3]),
            template_rounds: self.template_rounds,
            registration: RegistrationConfig {
                max_iters: self.max_iters,
                init_step: self.init_step,
                tol: self.tol,
                sample_stride: self.sample_stride,
            },
        }
    }
}

#[derive(Args, Serialize)]
struct PreprocessArgs {
    /// Cohort directory containing `cohort.json`.
    #[arg(long)]
    cohort: PathBuf,
    #[command(flatten)]
    opts: PreprocessOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Features {
    Kpca,
    Vaf,
}

#[derive(Args, Clone, Serialize)]
struct EnsembleOpts {
    #[arg(long, default_value_t = 28)]
    patch_side: usize,
    #[arg(long, value_enum, default_value_t = Features::Kpca)]
    features: Features,
    /// Bootstrap repeats per patch classifier.
    #[arg(long, default_value_t = 500)]
    repeats: usize,
    #[arg(long, default_value_t = 0.8)]
    subsample_fraction: f64,
    /// SVM RBF width in `exp(−γ‖x − z‖²)`.
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.2)]
    min_lung_fraction: f64,
    /// Retained kPCA variance.
    #[arg(long, default_value_t = 0.9)]
    variance: f64,
    /// Fixed kPCA RBF σ; the median pairwise distance is used when absent.
    #[arg(long)]
    kpca_sigma: Option<f64>,
    /// Fit the sigmoid without class weights.
    #[arg(long)]
    unweighted_calibration: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EnsembleOpts {
    fn config(&self) -> EnsembleConfig {
        EnsembleConfig {
            patch_side: self.patch_side,
            min_lung_fraction: self.min_lung_fraction,
            features: match self.features {
                Features::Kpca => FeatureMode::Kpca,
                Features::Vaf => FeatureMode::Voxels,
            },
            kpca_kernel: match self.kpca_sigma {
                Some(sigma) => KpcaKernel::Fixed {
                    spec: KernelSpec::Rbf { sigma },
                },
                None => KpcaKernel::RbfMedian,
            },
            variance_target: self.variance,
            svm: SvmConfig {
                c: self.c,
                gamma: self.gamma,
                weighting: ClassWeighting::Balanced,
                weighted_calibration: !self.unweighted_calibration,
                ..SvmConfig::default()
            },
            bootstrap: BootstrapConfig {
                repeats: self.repeats,
                subsample_fraction: self.subsample_fraction,
                ..BootstrapConfig::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Preprocessed directory containing `preprocessed.json`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    ensemble: EnsembleOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Preprocessed directory containing `preprocessed.json`.
    #[arg(long)]
    data: PathBuf,
    /// Subject ids to classify; all subjects when absent.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    /// Cohort directory containing `cohort.json`.
    #[arg(long)]
    cohort: PathBuf,
    /// kPCA patch sides; `evaluate` otherwise runs `--patch-side` with `--features`,
    /// `sweep` runs 24,28,32,42,48,56,64.
    #[arg(long, value_delimiter = ',')]
    patch_sides: Option<Vec<usize>>,
    /// Leave-one-out protocol (the only one implemented; accepted for clarity).
    #[arg(long)]
    loo: bool,
    /// Also run a baseline at `--baseline-side`.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value_t = 28)]
    baseline_side: usize,
    /// Cross-fitted registration templates; the template is rebuilt for every fold when absent.
    #[arg(long)]
    template_groups: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    confidence_resamples: usize,
    #[command(flatten)]
    preprocess: PreprocessOpts,
    #[command(flatten)]
    ensemble: EnsembleOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Baseline {
    Vaf,
}

fn write_lock(out: &Path, command: &str, threads: usize, effective: impl Serialize) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let lock = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "effective": effective,
    });
    let path = out.join("config.lock.json");
    fs::write(&path, serde_json::to_vec_pretty(&lock)?).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn generate(args: &GenerateArgs, threads: usize) -> Result<()> {
    let mut spec = PhantomSpec::for_dims([args.dims; 3]);
    if let Some(f) = args.focal_fraction {
        spec.focal_fraction = f;
    }
    if let Some(s) = args.noise {
        spec.noise_sigma = s;
    }
    if let Some(sides) = &args.patch_sides {
        spec.patch_sides = sides.clone();
    }
    write_lock(
        &args.out,
        "generate",
        threads,
        serde_json::json!({ "controls": args.controls, "diseased": args.diseased, "seed": args.seed, "spec": spec }),
    )?;
    let manifest = generate_cohort(&spec, args.controls, args.diseased, args.seed, &args.out)?;
    info!("wrote {} subjects to {}", manifest.subjects.len(), args.out.display());
    Ok(())
}

fn preprocess(args: &PreprocessArgs, threads: usize) -> Result<()> {
    let config = args.opts.config();
    write_lock(&args.out, "preprocess", threads, &config)?;
    let manifest = CohortManifest::load(args.cohort.join("cohort.json"))?;
    let results: Vec<(String, Result<(Volume3, LungMask)>)> = manifest
        .subjects
        .iter()
        .map(|s| {
            let r = load_volume(args.cohort.join(&s.volume)).and_then(|v| prepare_raw(v, config.target_dims));
            (s.id.clone(), r)
        })
        .collect();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(id, r)| r.as_ref().err().map(|e| format!("{id}: {e}")))
        .collect();
    if !failed.is_empty() {
        for f in &failed {
            error!("{f}");
        }
        return Err(Error::Segmentation(format!("{} subject(s) failed", failed.len())));
    }
    let (vols, masks): (Vec<Volume3>, Vec<LungMask>) = results.into_iter().map(|(_, r)| r.expect("checked")).unzip();
    let vrefs: Vec<&Volume3> = vols.iter().collect();
    let mrefs: Vec<&LungMask> = masks.iter().collect();
    let all: Vec<usize> = (0..vols.len()).collect();
    let pre = preprocess_cohort(&vrefs, &mrefs, &all, &config).inspect_err(|e| {
        if let Error::Volume { index, .. } = e {
            error!("{}: registration failed", manifest.subjects[*index].id);
        }
    })?;
    let template = registered_mean(&vrefs, &pre.transforms)?;
    let ids: Vec<String> = manifest.subjects.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<_> = manifest.subjects.iter().map(|s| s.label).collect();
    write_preprocessed(&args.out, &ids, &labels, &pre, &template)?;
    info!("preprocessed {} subjects into {}", ids.len(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs, threads: usize) -> Result<()> {
    let config = args.ensemble.config();
    write_lock(&args.out, "train", threads, config)?;
    let (manifest, vols, masks) = load_preprocessed(&args.data)?;
    let labels: Vec<_> = manifest.subjects.iter().map(|s| s.label).collect();
    let model = train_ensemble(&vols, &masks, &labels, &config)?;
    save_model(&model, &args.out)?;
    info!("trained {} patch classifiers", model.pipelines.len());
    Ok(())
}

fn classify(args: &ClassifyArgs, threads: usize) -> Result<()> {
    write_lock(
        &args.out,
        "classify",
        threads,
        serde_json::json!({ "model": args.model, "subjects": args.subjects }),
    )?;
    let model = load_model(&args.model)?;
    let (manifest, vols, masks) = load_preprocessed(&args.data)?;
    if let Some(wanted) = &args.subjects {
        if let Some(missing) = wanted.iter().find(|w| !manifest.subjects.iter().any(|s| &s.id == *w)) {
            return Err(Error::Argument(format!("unknown subject {missing}")));
        }
    }
    let mut csv = String::from("id,label,e_control,e_pneumonia\n");
    for (i, s) in manifest.subjects.iter().enumerate() {
        if args.subjects.as_ref().is_some_and(|w| !w.contains(&s.id)) {
            continue;
        }
        let d = classify_subject(&model, &vols[i], &masks[i])?;
        csv.push_str(&format!("{},{},{},{}\n", s.id, d.label, d.e_control, d.e_pneumonia));
        d.write_reliability_map(args.out.join(format!("{}_reliability.json", s.id)))?;
    }
    let path = args.out.join("decisions.csv");
    fs::write(&path, csv).map_err(|e| io_error(&path, e))
}

/// `sweep_sides` replaces the single `--patch-side` run when `--patch-sides` is absent.
fn evaluate(args: &EvaluateArgs, sweep_sides: Option<&[usize]>, default_baseline: Option<Baseline>, threads: usize) -> Result<()> {
    let base = args.ensemble.config();
    let mut runs: Vec<RunSpec> = match (args.patch_sides.as_deref(), sweep_sides) {
        (Some(sides), _) | (None, Some(sides)) => sides.iter().map(|&s| RunSpec::kpca(s)).collect(),
        (None, None) => vec![RunSpec {
            features: base.features,
            patch_side: base.patch_side,
        }],
    };
    if let Some(Baseline::Vaf) = args.baseline.or(default_baseline) {
        runs.push(RunSpec::vaf(args.baseline_side));
    }
    let config = LooConfig {
        preprocess: args.preprocess.config(),
        ensemble: base,
        runs,
        confidence_resamples: args.confidence_resamples,
        seed: args.ensemble.seed,
        template_groups: args.template_groups,
    };
    write_lock(&args.out, "evaluate", threads, &config)?;
    let cohort = Cohort::load(&args.cohort, config.preprocess.target_dims)?;
    let outcome = loo_sweep(&cohort, &config)?;
    for r in &outcome.reports {
        audit_leakage(&cohort.ids, r)?;
    }
    write_reports(&args.out, &outcome.reports)?;
    // Reliability maps for every subject flagged as pneumonia.
    for r in &outcome.reports {
        let dir = args.out.join("reliability").join(format!("{}_{}", r.method, r.patch_side));
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        for f in r.folds.iter().filter(|f| f.predicted.is_positive()) {
            let path = dir.join(format!("{}.json", f.subject_id));
            fs::write(&path, serde_json::to_vec_pretty(&f.votes)?).map_err(|e| io_error(&path, e))?;
        }
    }
    let timing = outcome.timing;
    let path = args.out.join("timing.json");
    fs::write(&path, serde_json::to_vec_pretty(&timing)?).map_err(|e| io_error(&path, e))?;
    info!("wrote {} reports to {}", outcome.reports.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli, threads: usize) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a, threads),
        Command::Preprocess(a) => preprocess(a, threads),
        Command::Train(a) => train(a, threads),
        Command::Classify(a) => classify(a, threads),
        Command::Evaluate(a) => evaluate(a, None, None, threads),
        Command::Sweep(a) => evaluate(a, Some(&TABLE_SIDES), Some(Baseline::Vaf), threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let threads = rayon::current_num_threads();
    match run(&cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
