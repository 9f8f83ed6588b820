//! Command-line interface over the core library: phantom generation,
//! topology validation, feature extraction, skeletonization, guided
//! sampling, masked editing, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Machine-readable output goes to stdout or to files; diagnostics to stderr.

mod util;

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use arteria_core::diffusion::{
    karras_sigmas, rng_from_seed, sample, Decoder, IdentityDecoder, SampleMode,
};
use arteria_core::guidance::{
    masked_edit_sample, AnalyticMorphProvider, AngDenoiser, CfgDenoiser, Conditional, EditMask,
    GuidanceSpec, GuidedDenoiser, LossGuidedDenoiser, LossVariant, MorphMapLoss,
};
use arteria_core::morphology::{extract_feature_matrix, normalize_features, smooth_features};
use arteria_core::phantom::{generate, generate_corpus, CorpusConfig, PhantomSpec};
use arteria_core::skeleton::{
    count_branches, hard_skeletonize, soft_skeletonize, soft_skeletonize_halfres, SkeletonGraph,
    TeasarParams,
};
use arteria_core::topology::{per_frame_violations, violation_rate, DEFAULT_RADIUS};
use arteria_core::volume::{
    read_volume, write_feature_csv, write_grid, write_volume, FeatureBounds, SegmentationMap,
    TissueClass,
};

const VERSION_LINE: &str = concat!(
    "arteria ",
    env!("CARGO_PKG_VERSION"),
    " (msv-schema 1, report-schema 1)"
);

#[derive(Parser)]
#[command(
    name = "arteria",
    version = VERSION_LINE,
    about = "Voxel artery phantoms, topology checks, morpho-skeletal features, and guided diffusion sampling"
)]
struct Cli {
    /// Worker threads for parallel sections (defaults to the CPU count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level for diagnostics on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom volume (or a randomized corpus).
    Phantom(PhantomArgs),
    /// Check the wall-containment prior per cross section.
    TopoValidate(TopoArgs),
    /// Extract per-frame morphological feature curves to CSV.
    MorphExtract(MorphArgs),
    /// Extract the lumen centerline (hard) or a soft skeleton grid.
    Skeletonize(SkelArgs),
    /// Sample segmentation maps from a dataset-backed denoiser.
    Sample(SampleArgs),
    /// Resample a reference volume inside a mask.
    Edit(EditArgs),
    /// Distribution and fidelity metrics between two sets of volumes.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec JSON (see the README for the schema).
    #[arg(long, conflicts_with = "corpus")]
    spec: Option<PathBuf>,
    /// Corpus config JSON; writes item_###.msv plus ground truth.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output volume path (with --spec).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Output directory (with --corpus).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TopoArgs {
    volume: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: usize,
    /// lumen, calcium, or both.
    #[arg(long, default_value = "both")]
    class: String,
    /// json or csv.
    #[arg(long, default_value = "json")]
    report: String,
}

#[derive(Args)]
struct MorphArgs {
    volume: PathBuf,
    /// Comma-separated feature names.
    #[arg(long)]
    features: Option<String>,
    /// Savitzky-Golay window (odd); smoothing is off unless given.
    #[arg(long)]
    smooth: Option<usize>,
    /// JSON file {feature: [p2, p98]} for normalization.
    #[arg(long)]
    normalize: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SkelArgs {
    volume: PathBuf,
    /// hard or soft.
    #[arg(long, default_value = "hard")]
    method: String,
    /// JSON overrides for the hard-skeleton parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Erosion rounds for the soft method.
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Skip the in-plane half-resolution wrapper (soft method).
    #[arg(long)]
    full_res: bool,
    /// Output path: .json for the graph, .msv for a voxel grid.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerOpts {
    #[arg(long, default_value_t = 25)]
    steps: usize,
    /// sde or ode.
    #[arg(long, default_value = "sde")]
    mode: String,
    #[arg(long, default_value_t = 0.01)]
    sigma_min: f64,
    #[arg(long, default_value_t = 80.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    /// JSON config with the same keys; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Condition kernel bandwidth of the reference denoiser.
    #[arg(long)]
    tau: Option<f64>,
    /// Include the skeletal conditioning channel (hard skeleton heatmaps).
    #[arg(long)]
    with_skeleton: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Directory of .msv volumes backing the denoiser.
    #[arg(long)]
    dataset: PathBuf,
    /// Guidance spec: none | cfg:w=5 | ang:w=5[,features=a+b] | dps:w=5 | cg:w=5.
    #[arg(long, default_value = "none")]
    guidance: String,
    /// Volume whose morpho-skeleton provides the target condition.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Comma-separated conditioning features.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerOpts,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Reference volume to edit.
    #[arg(long)]
    reference: PathBuf,
    /// Mask spec: region:<start>..<end> | tissue:<class>[+<class>...][,dilate=N].
    #[arg(long)]
    mask: String,
    #[arg(long, default_value = "none")]
    guidance: String,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerOpts,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    /// Comma-separated subset of fd, pr, fidelity, topo.
    #[arg(long, default_value = "fd,pr,fidelity,topo")]
    metrics: String,
    /// Report JSON path; stdout receives the report either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems (including missing required arguments) exit 1;
            // --help and --version print to stdout and exit 0.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("arteria: could not configure {threads} threads: {err}");
        }
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("arteria: {err:#}");
            std::process::exit(classify(&err));
        }
    }
}

/// Exit 3 for numerical failures, 2 for everything else past argument
/// parsing.
fn classify(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<arteria_core::Error>() {
            if core.is_numerical() {
                return 3;
            }
        }
    }
    2
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::TopoValidate(args) => cmd_topo(args),
        Command::MorphExtract(args) => cmd_morph(args),
        Command::Skeletonize(args) => cmd_skeletonize(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    match (&args.spec, &args.corpus) {
        (Some(spec_path), None) => {
            let output = args
                .output
                .ok_or_else(|| anyhow!("--spec requires -o/--output"))?;
            let text = std::fs::read_to_string(spec_path)
                .with_context(|| format!("reading {}", spec_path.display()))?;
            let spec: PhantomSpec = serde_json::from_str(&text).context("parsing phantom spec")?;
            let map = generate(&spec)?;
            write_volume(&map, &output)?;
            Ok(())
        }
        (None, Some(corpus_path)) => {
            let out_dir = args
                .out_dir
                .ok_or_else(|| anyhow!("--corpus requires --out-dir"))?;
            let text = std::fs::read_to_string(corpus_path)
                .with_context(|| format!("reading {}", corpus_path.display()))?;
            let config: CorpusConfig =
                serde_json::from_str(&text).context("parsing corpus config")?;
            std::fs::create_dir_all(&out_dir)?;
            let corpus = generate_corpus(&config)?;
            for (i, item) in corpus.iter().enumerate() {
                write_volume(&item.map, out_dir.join(format!("item_{i:03}.msv")))?;
                write_feature_csv(
                    &item.features,
                    out_dir.join(format!("item_{i:03}_features.csv")),
                )?;
                let graph = serde_json::to_string(&item.skeleton)?;
                std::fs::write(out_dir.join(format!("item_{i:03}_skeleton.json")), graph)?;
            }
            Ok(())
        }
        _ => bail!("exactly one of --spec or --corpus is required"),
    }
}

// ---------------------------------------------------------------------------
// topo-validate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TopoReport {
    class: String,
    radius: usize,
    rate: f64,
    frames: Vec<bool>,
}

fn topo_classes(arg: &str) -> Result<Vec<TissueClass>> {
    match arg {
        "lumen" => Ok(vec![TissueClass::Lumen]),
        "calcium" => Ok(vec![TissueClass::Calcium]),
        "both" => Ok(vec![TissueClass::Lumen, TissueClass::Calcium]),
        other => bail!("unknown class {other:?} (expected lumen, calcium, or both)"),
    }
}

fn cmd_topo(args: TopoArgs) -> Result<()> {
    let map = read_volume(&args.volume)?;
    let classes = topo_classes(&args.class)?;
    let mut reports = Vec::new();
    for class in classes {
        let frames = per_frame_violations(&map, class, args.radius)?;
        let rate = violation_rate(&map, class, args.radius)?;
        reports.push(TopoReport {
            class: class.name().to_string(),
            radius: args.radius,
            rate,
            frames,
        });
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match args.report.as_str() {
        "json" => writeln!(out, "{}", serde_json::to_string(&reports)?)?,
        "csv" => {
            writeln!(out, "class,frame,violating")?;
            for report in &reports {
                for (frame, flag) in report.frames.iter().enumerate() {
                    writeln!(out, "{},{},{}", report.class, frame, u8::from(*flag))?;
                }
            }
            for report in &reports {
                writeln!(out, "{},rate,{}", report.class, report.rate)?;
            }
        }
        other => bail!("unknown report format {other:?} (expected json or csv)"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// morph-extract
// ---------------------------------------------------------------------------

fn cmd_morph(args: MorphArgs) -> Result<()> {
    let map = read_volume(&args.volume)?;
    let features = util::features_or_default(args.features.as_deref());
    let mut matrix = extract_feature_matrix(&map, &features)?;
    if let Some(path) = &args.normalize {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let table: std::collections::BTreeMap<String, [f64; 2]> =
            serde_json::from_str(&text).context("parsing bounds file")?;
        let bounds: Vec<FeatureBounds> = features
            .iter()
            .map(|name| {
                table
                    .get(name)
                    .map(|b| FeatureBounds { p2: b[0], p98: b[1] })
                    .ok_or_else(|| anyhow!("bounds file has no entry for {name:?}"))
            })
            .collect::<Result<_>>()?;
        matrix = normalize_features(&matrix, &bounds)?;
    }
    if let Some(window) = args.smooth {
        matrix = smooth_features(&matrix, window, 2)?;
    }
    write_feature_csv(&matrix, &args.output)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// skeletonize
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SkelSummary {
    nodes: usize,
    edges: usize,
    branches: usize,
}

fn cmd_skeletonize(args: SkelArgs) -> Result<()> {
    let map = read_volume(&args.volume)?;
    let lumen = map.class_mask(TissueClass::Lumen);
    let ext = args
        .output
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("");
    match args.method.as_str() {
        "hard" => {
            let params: TeasarParams = match &args.params {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).context("parsing skeleton params")?
                }
                None => TeasarParams::default(),
            };
            let graph = hard_skeletonize(&lumen, &params);
            let branches = count_branches(&graph)?;
            match ext {
                "json" => {
                    std::fs::write(&args.output, serde_json::to_string(&graph)?)?;
                }
                "msv" => {
                    let grid = graph.rasterize(map.dims())?;
                    write_grid(&to_channel_grid(&grid), &args.output)?;
                }
                other => bail!("unknown skeleton output extension {other:?}"),
            }
            println!(
                "{}",
                serde_json::to_string(&SkelSummary {
                    nodes: graph.nodes.len(),
                    edges: graph.edges.len(),
                    branches,
                })?
            );
        }
        "soft" => {
            if ext != "msv" {
                bail!("the soft skeleton is a voxel grid; use a .msv output path");
            }
            let grid = lumen.mapv(|v| if v { 1.0 } else { 0.0 });
            let skel = if args.full_res {
                soft_skeletonize(&grid, args.iterations)
            } else {
                soft_skeletonize_halfres(&grid, args.iterations)
            };
            write_grid(&to_channel_grid(&skel), &args.output)?;
        }
        other => bail!("unknown method {other:?} (expected hard or soft)"),
    }
    Ok(())
}

fn to_channel_grid(grid: &ndarray::Array3<f64>) -> ndarray::Array4<f64> {
    let (h, w, d) = grid.dim();
    let mut out = ndarray::Array4::zeros((1, h, w, d));
    for ((x, y, z), &v) in grid.indexed_iter() {
        out[(0, x, y, z)] = v;
    }
    out
}

// ---------------------------------------------------------------------------
// sample / edit
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SamplerConfig {
    steps: Option<usize>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
    rho: Option<f64>,
    mode: Option<String>,
}

struct ResolvedSampler {
    schedule: arteria_core::diffusion::NoiseSchedule,
    mode: SampleMode,
}

fn resolve_sampler(opts: &SamplerOpts) -> Result<ResolvedSampler> {
    let mut steps = opts.steps;
    let mut sigma_min = opts.sigma_min;
    let mut sigma_max = opts.sigma_max;
    let mut rho = opts.rho;
    let mut mode = opts.mode.clone();
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let config: SamplerConfig =
            serde_json::from_str(&text).context("parsing sampler config")?;
        // The config file supplies defaults; flags keep their own defaults,
        // so only fill values the user left untouched.
        if opts.steps == 25 {
            steps = config.steps.unwrap_or(steps);
        }
        if opts.sigma_min == 0.01 {
            sigma_min = config.sigma_min.unwrap_or(sigma_min);
        }
        if opts.sigma_max == 80.0 {
            sigma_max = config.sigma_max.unwrap_or(sigma_max);
        }
        if opts.rho == 3.0 {
            rho = config.rho.unwrap_or(rho);
        }
        if opts.mode == "sde" {
            mode = config.mode.unwrap_or(mode);
        }
    }
    Ok(ResolvedSampler {
        schedule: karras_sigmas(steps, sigma_min, sigma_max, rho)?,
        mode: SampleMode::from_str(&mode)?,
    })
}

/// Builds the guided denoiser for the requested strategy and runs one chain.
fn run_chain(
    prepared: &util::PreparedDataset,
    guidance: &GuidanceSpec,
    target: Option<&SegmentationMap>,
    resolved: &ResolvedSampler,
    seed: u64,
    edit: Option<(&SegmentationMap, &EditMask)>,
) -> Result<SegmentationMap> {
    let cond = target
        .map(|t| util::target_condition(prepared, t))
        .transpose()?;
    let require_cond = |what: &str| {
        cond.clone()
            .ok_or_else(|| anyhow!("{what} guidance requires --target"))
    };
    let den = &prepared.denoiser;
    let decoder = IdentityDecoder;
    let mut rng = rng_from_seed(seed);

    let latent = match guidance {
        GuidanceSpec::None => {
            let mut guided = Conditional::new(den, cond.clone());
            run_inner(&mut guided, prepared, resolved, &mut rng, edit)?
        }
        GuidanceSpec::Cfg { weight } => {
            let mut guided = CfgDenoiser::new(den, require_cond("cfg")?, *weight);
            run_inner(&mut guided, prepared, resolved, &mut rng, edit)?
        }
        GuidanceSpec::Ang { weight, .. } => {
            let mut guided = AngDenoiser::new(
                den,
                &decoder,
                &prepared.conditioner,
                require_cond("ang")?,
                *weight,
            )?;
            run_inner(&mut guided, prepared, resolved, &mut rng, edit)?
        }
        GuidanceSpec::Dps { weight } | GuidanceSpec::Cg { weight } => {
            let variant = if matches!(guidance, GuidanceSpec::Dps { .. }) {
                LossVariant::Dps
            } else {
                LossVariant::Cg
            };
            let cond = require_cond("loss")?;
            let loss =
                MorphMapLoss::from_conditioner(&prepared.conditioner, cond.morph.clone())?;
            let provider = AnalyticMorphProvider {
                loss: &loss,
                variant,
                base: Some(den),
                cond: Some(cond.clone()),
            };
            let mut guided = LossGuidedDenoiser::new(den, Some(cond), &provider, *weight);
            run_inner(&mut guided, prepared, resolved, &mut rng, edit)?
        }
    };
    Ok(IdentityDecoder.decode(&latent)?.argmax_labels())
}

fn run_inner(
    guided: &mut dyn GuidedDenoiser,
    prepared: &util::PreparedDataset,
    resolved: &ResolvedSampler,
    rng: &mut impl rand::Rng,
    edit: Option<(&SegmentationMap, &EditMask)>,
) -> Result<arteria_core::volume::LatentGrid> {
    match edit {
        None => Ok(sample(
            guided,
            &resolved.schedule,
            prepared.shape,
            1,
            resolved.mode,
            rng,
            None,
        )?),
        Some((reference, mask)) => {
            let edited = masked_edit_sample(
                guided,
                &resolved.schedule,
                reference,
                mask,
                resolved.mode,
                rng,
            )?;
            Ok(arteria_core::diffusion::encode_labels(&edited))
        }
    }
}

fn guidance_features(spec: &GuidanceSpec, flag: Option<&str>) -> Vec<String> {
    if let GuidanceSpec::Ang {
        features: Some(f), ..
    } = spec
    {
        return f.clone();
    }
    util::features_or_default(flag)
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let guidance = GuidanceSpec::from_str(&args.guidance)?;
    let features = guidance_features(&guidance, args.features.as_deref());
    let volumes = util::load_volume_dir(&args.dataset)?;
    let maps: Vec<SegmentationMap> = volumes.into_iter().map(|(_, m)| m).collect();
    let tau = args.sampler.tau.unwrap_or_else(util::default_tau);
    let prepared = util::prepare_dataset(&maps, &features, args.sampler.with_skeleton, tau)?;
    let target = args.target.as_ref().map(read_volume).transpose()?;
    let resolved = resolve_sampler(&args.sampler)?;
    let map = run_chain(
        &prepared,
        &guidance,
        target.as_ref(),
        &resolved,
        args.seed,
        None,
    )?;
    write_volume(&map, &args.output)?;
    Ok(())
}

fn parse_mask(spec: &str, reference: &SegmentationMap) -> Result<EditMask> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("mask spec needs kind:args, got {spec:?}"))?;
    match kind {
        "region" => {
            let (a, b) = rest
                .split_once("..")
                .ok_or_else(|| anyhow!("region mask needs start..end, got {rest:?}"))?;
            let start: usize = a.parse().context("region start")?;
            let end: usize = b.parse().context("region end")?;
            if start >= end || end > reference.depth() {
                bail!(
                    "region {start}..{end} out of range for depth {}",
                    reference.depth()
                );
            }
            Ok(EditMask::region(reference.dims(), start, end))
        }
        "tissue" => {
            let mut classes_part = rest;
            let mut dilate = 0usize;
            if let Some((head, tail)) = rest.split_once(',') {
                classes_part = head;
                let (key, value) = tail
                    .split_once('=')
                    .ok_or_else(|| anyhow!("bad tissue mask option {tail:?}"))?;
                if key != "dilate" {
                    bail!("unknown tissue mask option {key:?}");
                }
                dilate = value.parse().context("dilate radius")?;
            }
            let classes: Vec<TissueClass> = classes_part
                .split('+')
                .map(TissueClass::from_name)
                .collect::<arteria_core::Result<_>>()?;
            Ok(EditMask::tissue(reference, &classes, dilate))
        }
        other => bail!("unknown mask kind {other:?} (expected region or tissue)"),
    }
}

fn cmd_edit(args: EditArgs) -> Result<()> {
    let guidance = GuidanceSpec::from_str(&args.guidance)?;
    let features = guidance_features(&guidance, args.features.as_deref());
    let volumes = util::load_volume_dir(&args.dataset)?;
    let maps: Vec<SegmentationMap> = volumes.into_iter().map(|(_, m)| m).collect();
    let tau = args.sampler.tau.unwrap_or_else(util::default_tau);
    let prepared = util::prepare_dataset(&maps, &features, args.sampler.with_skeleton, tau)?;
    let reference = read_volume(&args.reference)?;
    if reference.dims() != prepared.spatial {
        bail!("reference dimensions do not match the dataset");
    }
    let mask = parse_mask(&args.mask, &reference)?;
    let target = args.target.as_ref().map(read_volume).transpose()?;
    let resolved = resolve_sampler(&args.sampler)?;
    let map = run_chain(
        &prepared,
        &guidance,
        target.as_ref(),
        &resolved,
        args.seed,
        Some((&reference, &mask)),
    )?;
    write_volume(&map, &args.output)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize, Default)]
struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    precision_3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall_3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    precision_2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall_2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    morph_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skel_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    topo_violation_lumen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    topo_violation_calcium: Option<f64>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    use arteria_core::evaluation::{
        conditional_fidelity_morph, conditional_fidelity_skel_graphs, frechet_distance,
        precision_recall, FeatureSet,
    };
    let metrics: std::collections::BTreeSet<&str> = args.metrics.split(',').collect();
    for metric in &metrics {
        if !["fd", "pr", "fidelity", "topo"].contains(metric) {
            bail!("unknown metric {metric:?} (expected fd, pr, fidelity, topo)");
        }
    }
    let real: Vec<SegmentationMap> = util::load_volume_dir(&args.real)?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let gen: Vec<SegmentationMap> = util::load_volume_dir(&args.gen)?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let mut report = Report::default();
    if metrics.contains("fd") || metrics.contains("pr") {
        let real_3d = FeatureSet::volumes_3d(&real)?;
        let gen_3d = FeatureSet::volumes_3d(&gen)?;
        let real_2d = FeatureSet::frames_2d(&real)?;
        let gen_2d = FeatureSet::frames_2d(&gen)?;
        if metrics.contains("fd") {
            report.fd_3d = Some(frechet_distance(&real_3d, &gen_3d)?);
            report.fd_2d = Some(frechet_distance(&real_2d, &gen_2d)?);
        }
        if metrics.contains("pr") {
            let (p3, r3) = precision_recall(&real_3d, &gen_3d, 3)?;
            let (p2, r2) = precision_recall(&real_2d, &gen_2d, 3)?;
            report.precision_3d = Some(p3);
            report.recall_3d = Some(r3);
            report.precision_2d = Some(p2);
            report.recall_2d = Some(r2);
        }
    }
    if metrics.contains("fidelity") {
        if real.len() != gen.len() {
            bail!(
                "fidelity metrics pair volumes by sorted order and need equal counts ({} real vs {} generated)",
                real.len(),
                gen.len()
            );
        }
        let names = util::features_or_default(None);
        let targets: Vec<_> = real
            .iter()
            .map(|m| extract_feature_matrix(m, &names))
            .collect::<arteria_core::Result<_>>()?;
        report.morph_mae = Some(conditional_fidelity_morph(&targets, &gen)?);
        let params = TeasarParams::default();
        let target_graphs: Vec<SkeletonGraph> = real
            .iter()
            .map(|m| hard_skeletonize(&m.class_mask(TissueClass::Lumen), &params))
            .collect();
        report.skel_mae = Some(conditional_fidelity_skel_graphs(
            &target_graphs,
            &gen,
            &params,
        )?);
    }
    if metrics.contains("topo") {
        let mean_rate = |class: TissueClass| -> Result<f64> {
            let mut acc = 0.0;
            for map in &gen {
                acc += violation_rate(map, class, DEFAULT_RADIUS)?;
            }
            Ok(acc / gen.len() as f64)
        };
        report.topo_violation_lumen = Some(mean_rate(TissueClass::Lumen)?);
        report.topo_violation_calcium = Some(mean_rate(TissueClass::Calcium)?);
    }
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}
