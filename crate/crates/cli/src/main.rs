use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pqsuite::boundary::BoundaryMode;
use pqsuite::metrics::{FrequencyBasis, Metric};
use pqsuite::panoptic_io::{
    self, align_annotations, normalize_annotation, CategoryMapping, Dataset, ImageSetPolicy,
};
use pqsuite::synth::{self, Perturbation, PerturbationKind, SceneSpec};
use pqsuite::{AggregateConvention, DenominatorConvention, Error, MetricConfig, MetricReport};

mod selftest;

/// Failure classes mapped onto the exit-code contract.
#[derive(Debug)]
enum Failure {
    /// Exit 2: bad flags, unreadable or malformed inputs.
    Usage(anyhow::Error),
    /// Exit 1: the run completed but something failed.
    Evaluation(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.downcast_ref::<Error>().is_some_and(|e| {
            matches!(
                e,
                Error::InvalidParameter(_) | Error::MissingFile(_) | Error::Json(_)
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Evaluation(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "pqsuite",
    version,
    about = "Panoptic Quality metrics for COCO panoptic annotations"
)]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Turn class/instance mask pairs into a COCO panoptic dataset.
    Convert(ConvertArgs),
    /// Render segments with deterministic colors.
    Visualize(VisualizeArgs),
    /// Write a synthetic ground-truth dataset and a perturbed prediction.
    Synth(SynthArgs),
    /// Check the fast pipeline against the brute-force reference.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Denominator {
    Kirillov,
    Eq1,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregate {
    Class,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum BpqMode {
    Boundary,
    Min,
}

#[derive(Clone, Copy, ValueEnum)]
enum Basis {
    Pixels,
    Instances,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth manifest JSON.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction manifest JSON.
    #[arg(long)]
    pred: PathBuf,
    /// PNG directory of the ground truth (default: next to the manifest).
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// PNG directory of the predictions.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Metric config JSON to start from; a previous report also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of pq,mpq+,bpq,ipq,wpq,fwpq,r2.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    #[arg(long)]
    bpq_d: Option<f64>,
    #[arg(long, value_enum)]
    bpq_mode: Option<BpqMode>,
    #[arg(long)]
    wpq_a: Option<f64>,
    #[arg(long)]
    wpq_d: Option<f64>,
    #[arg(long, value_enum)]
    denominator: Option<Denominator>,
    #[arg(long, value_enum)]
    aggregate: Option<Aggregate>,
    /// Report both aggregation conventions side by side.
    #[arg(long)]
    all_aggregates: bool,
    /// fwPQ class weights.
    #[arg(long, value_enum)]
    fwpq_basis: Option<Basis>,
    /// IoU a match must exceed.
    #[arg(long)]
    match_threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Report file. Without it the report goes to stdout and the summary
    /// table to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "PQSUITE_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Fail on differing image sets instead of warning.
    #[arg(long)]
    strict: bool,
    /// Recompute everything with the brute-force reference and compare.
    #[arg(long)]
    verify_oracle: bool,
    /// Omit the timestamp so reruns are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory with `class/` and `instance/` subdirectories of same-named PNGs.
    #[arg(long)]
    masks: PathBuf,
    /// Category mapping JSON.
    #[arg(long)]
    categories: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name: writes `<out>/<name>.json` and `<out>/<name>/`.
    #[arg(long, default_value = "panoptic")]
    name: String,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    png_dir: Option<PathBuf>,
    /// Second manifest rendered beside the first (gt | pred composite).
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Image ids to render (default: all).
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<String>>,
    /// Palette seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw segment outlines in white.
    #[arg(long)]
    contours: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    classes: u32,
    #[arg(long, default_value_t = 1)]
    min_instances: u32,
    #[arg(long, default_value_t = 5)]
    max_instances: u32,
    #[arg(long, default_value_t = 2.0)]
    min_radius: f64,
    #[arg(long, default_value_t = 5.0)]
    max_radius: f64,
    #[arg(long, default_value_t = 1)]
    min_gap: u32,
    /// Per-class radius multipliers, e.g. `1,1,0.5`.
    #[arg(long, value_delimiter = ',')]
    class_scale: Vec<f64>,
    /// Prediction perturbation `kind:magnitude` (repeatable), kinds: erode,
    /// dilate, shift, split, merge, drop, spurious, relabel-class. Without
    /// any, a seeded random mix is applied per image.
    #[arg(long = "perturb")]
    perturbations: Vec<String>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Number of seed banks.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let outcome = match cli.command {
        Command::Evaluate(a) => evaluate(a, verbose),
        Command::Convert(a) => convert(a),
        Command::Visualize(a) => visualize(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Selftest(a) => selftest::run(a.seed, a.seeds, a.inject_fault),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Evaluation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn resolve_config(a: &EvaluateArgs) -> Result<MetricConfig, Failure> {
    let mut c = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Usage)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::Usage)?;
            let inner = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(inner)
                .with_context(|| format!("{} is not a metric config", path.display()))
                .map_err(Failure::Usage)?
        }
        None => MetricConfig::default(),
    };
    if let Some(list) = &a.metrics {
        c.metrics = list
            .iter()
            .map(|m| m.parse::<Metric>())
            .collect::<Result<_, _>>()
            .map_err(usage)?;
    }
    if let Some(v) = a.bpq_d {
        c.bpq_d = v;
    }
    if let Some(v) = a.bpq_mode {
        c.bpq_mode = match v {
            BpqMode::Boundary => BoundaryMode::Boundary,
            BpqMode::Min => BoundaryMode::Min,
        };
    }
    if let Some(v) = a.wpq_a {
        c.wpq_a = v;
    }
    if let Some(v) = a.wpq_d {
        c.wpq_d = v;
    }
    if let Some(v) = a.denominator {
        c.denominator = match v {
            Denominator::Kirillov => DenominatorConvention::Kirillov,
            Denominator::Eq1 => DenominatorConvention::Eq1Literal,
        };
    }
    if let Some(v) = a.aggregate {
        c.aggregate = match v {
            Aggregate::Class => AggregateConvention::MacroClass,
            Aggregate::Image => AggregateConvention::MacroImage,
        };
    }
    if a.all_aggregates {
        c.all_aggregates = true;
    }
    if let Some(v) = a.fwpq_basis {
        c.fwpq_basis = match v {
            Basis::Pixels => FrequencyBasis::Pixels,
            Basis::Instances => FrequencyBasis::Instances,
        };
    }
    if let Some(v) = a.match_threshold {
        c.match_threshold = v;
    }
    c.check().map_err(usage)?;
    Ok(c)
}

fn open_dataset(json: &Path, dir: Option<&Path>) -> Result<Dataset, Failure> {
    Dataset::open(json, dir).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) | Error::MissingFile(_) => {
            usage(format!("{}: {e}", json.display()))
        }
        other => other.into(),
    })
}

fn evaluate(a: EvaluateArgs, verbose: u8) -> CmdResult {
    let config = resolve_config(&a)?;
    let gt = open_dataset(&a.gt, a.gt_dir.as_deref())?;
    let pred = open_dataset(&a.pred, a.pred_dir.as_deref())?;
    let policy = if a.strict {
        ImageSetPolicy::Strict
    } else {
        ImageSetPolicy::Lenient
    };
    if verbose > 0 {
        eprintln!(
            "evaluating {} gt images against {} predictions",
            gt.manifest.images.len(),
            pred.manifest.images.len()
        );
    }
    let mut report = panoptic_io::evaluate_dataset(&gt, &pred, &config, a.jobs, policy)?;
    if !a.no_timestamp {
        report.generated_at = Some(
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        );
    }
    if verbose > 0 {
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
    }

    let body = match a.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    let table = report.summary_table();
    match &a.out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            print!("{body}");
        }
    }

    for e in &report.errors {
        eprintln!("image {}: {}", e.image_id, e.message);
    }
    if a.verify_oracle {
        verify_oracle(&gt, &pred, &config, policy, &report)?;
    }
    if !report.errors.is_empty() {
        return Err(Failure::Evaluation(anyhow!(
            "{} image(s) failed",
            report.errors.len()
        )));
    }
    Ok(())
}

fn verify_oracle(
    gt: &Dataset,
    pred: &Dataset,
    config: &MetricConfig,
    policy: ImageSetPolicy,
    report: &MetricReport,
) -> CmdResult {
    let load = |ds: &Dataset, side: &str| -> anyhow::Result<Vec<_>> {
        let mut out = Vec::new();
        for id in ds.manifest.image_ids() {
            let mut ann = ds.load(&id).with_context(|| format!("{side} image {id}"))?;
            if policy == ImageSetPolicy::Lenient {
                normalize_annotation(&mut ann, side);
            }
            out.push(ann);
        }
        Ok(out)
    };
    let mut warnings = Vec::new();
    let pairs = align_annotations(load(gt, "gt")?, load(pred, "pred")?, policy, &mut warnings)?;
    let reference = pqsuite::oracle::oracle_metrics(&pairs, config)?;
    let diffs = pqsuite::oracle::compare_reports(report, &reference, 1e-12);
    if diffs.is_empty() {
        eprintln!("oracle check: report matches the brute-force reference");
        Ok(())
    } else {
        for d in &diffs {
            eprintln!("oracle mismatch: {d}");
        }
        Err(Failure::Evaluation(anyhow!(
            "{} difference(s) from the brute-force reference",
            diffs.len()
        )))
    }
}

fn convert(a: ConvertArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.categories)
        .with_context(|| format!("reading {}", a.categories.display()))
        .map_err(Failure::Usage)?;
    let mapping = CategoryMapping::from_json(&text)
        .map_err(|e| usage(format!("{}: {e}", a.categories.display())))?;
    let class_dir = a.masks.join("class");
    let inst_dir = a.masks.join("instance");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&class_dir)
        .with_context(|| format!("listing {}", class_dir.display()))
        .map_err(Failure::Usage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();

    let mut annotations = Vec::new();
    let mut failures = Vec::new();
    for class_path in names {
        let stem = class_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let inst_path = inst_dir.join(class_path.file_name().unwrap());
        let result = (|| -> anyhow::Result<_> {
            let class_png = std::fs::read(&class_path)?;
            let inst_png = std::fs::read(&inst_path)
                .with_context(|| format!("reading {}", inst_path.display()))?;
            Ok(panoptic_io::ingest_mask_pair(
                &stem, &class_png, &inst_png, &mapping,
            )?)
        })();
        match result {
            Ok(ann) => annotations.push(ann),
            Err(e) => failures.push(format!("{stem}: {e:#}")),
        }
    }
    let json =
        panoptic_io::write_dataset(&a.out, &a.name, &annotations, mapping.coco_categories())?;
    println!("wrote {} image(s) to {}", annotations.len(), json.display());
    for f in &failures {
        eprintln!("failed: {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Evaluation(anyhow!(
            "{} file(s) failed to convert",
            failures.len()
        )))
    }
}

fn visualize(a: VisualizeArgs) -> CmdResult {
    let gt = open_dataset(&a.manifest, a.png_dir.as_deref())?;
    let pred = match &a.pred {
        Some(p) => Some(open_dataset(p, a.pred_dir.as_deref())?),
        None => None,
    };
    let ids = a.ids.clone().unwrap_or_else(|| gt.manifest.image_ids());
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for id in ids {
        let ann = gt.load(&id)?;
        let left = panoptic_io::render_visualization(&ann, a.seed, a.contours);
        let (image, name) = match &pred {
            Some(p) => {
                let right = panoptic_io::render_visualization(&p.load(&id)?, a.seed, a.contours);
                (
                    panoptic_io::composite(&[&left, &right])?,
                    format!("{id}_composite.png"),
                )
            }
            None => (left, format!("{id}.png")),
        };
        let path = a.out.join(name);
        std::fs::write(&path, image.to_png()?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn parse_perturbation(s: &str, seed: u64) -> Result<Perturbation, Failure> {
    let (kind, mag) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("perturbation {s:?} is not kind:magnitude")))?;
    let kind: PerturbationKind = kind.parse().map_err(usage)?;
    let magnitude: f64 = mag
        .parse()
        .map_err(|_| usage(format!("bad magnitude in {s:?}")))?;
    Ok(Perturbation::new(kind, magnitude, seed))
}

fn synth_cmd(a: SynthArgs) -> CmdResult {
    let spec = SceneSpec {
        seed: a.seed,
        width: a.width,
        height: a.height,
        num_classes: a.classes,
        instances: (a.min_instances, a.max_instances),
        radius: (a.min_radius, a.max_radius),
        min_gap: a.min_gap,
        class_scale: a.class_scale.clone(),
    };
    let gts = synth::generate_dataset(&spec, a.images).map_err(usage)?;
    let mut preds = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        let pseed = synth::derive_seed(a.seed, &[0xbe7a, i as u64]);
        let ps = if a.perturbations.is_empty() {
            synth::random_perturbations(pseed)
        } else {
            a.perturbations
                .iter()
                .enumerate()
                .map(|(k, p)| parse_perturbation(p, synth::derive_seed(pseed, &[k as u64])))
                .collect::<Result<_, _>>()?
        };
        preds.push(synth::perturb_all(g, &ps)?);
    }
    let cats: Vec<_> = (1..=a.classes)
        .map(|id| panoptic_io::Category {
            id,
            name: format!("class{id}"),
            supercategory: String::new(),
            isthing: 1,
            color: None,
        })
        .collect();
    let gt = panoptic_io::write_dataset(&a.out, "gt", &gts, cats.clone())?;
    let pred = panoptic_io::write_dataset(&a.out, "pred", &preds, cats)?;
    println!("{}", gt.display());
    println!("{}", pred.display());
    Ok(())
}
