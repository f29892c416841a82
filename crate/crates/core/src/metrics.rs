//! The Panoptic Quality family over match results.
//!
//! Every metric is built from per-(image, class) cells holding TP/FP/FN counts
//! and the per-TP quality sums of the three IoU variants (plain, boundary,
//! weighted). Aggregation conventions:
//!
//! * `macro-class`: per class, pool the cells over all images, then average the
//!   class values. This is also how mPQ+ is defined, so the two agree.
//! * `macro-image`: per image, average the defined class cells, then average the
//!   image values.
//!
//! Cells with `tp + fp + fn = 0` are undefined and never enter a mean.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{self, BoundaryMode};
use crate::matching::{self, MatchConfig, MatchResult, TpPair};
use crate::report::{AggregateValues, ClassReport, Counts, ImageError, ImageReport, MetricReport};
use crate::segmap::PanopticAnnotation;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenominatorConvention {
    /// `tp + fp/2 + fn/2`
    #[default]
    #[serde(rename = "kirillov")]
    Kirillov,
    /// `(tp + fp + fn) / 2`
    #[serde(rename = "eq1")]
    Eq1Literal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregateConvention {
    #[default]
    #[serde(rename = "class")]
    MacroClass,
    #[serde(rename = "image")]
    MacroImage,
}

/// Class weighting basis for fwPQ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBasis {
    #[default]
    Pixels,
    Instances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "pq")]
    Pq,
    #[serde(rename = "mpq+")]
    MpqPlus,
    #[serde(rename = "bpq")]
    Bpq,
    #[serde(rename = "ipq")]
    Ipq,
    #[serde(rename = "wpq")]
    Wpq,
    #[serde(rename = "fwpq")]
    Fwpq,
    #[serde(rename = "r2")]
    R2,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Pq,
        Metric::MpqPlus,
        Metric::Bpq,
        Metric::Ipq,
        Metric::Wpq,
        Metric::Fwpq,
        Metric::R2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Pq => "pq",
            Metric::MpqPlus => "mpq+",
            Metric::Bpq => "bpq",
            Metric::Ipq => "ipq",
            Metric::Wpq => "wpq",
            Metric::Fwpq => "fwpq",
            Metric::R2 => "r2",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown metric {s:?}")))
    }
}

/// Fully explicit evaluation configuration; echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub metrics: BTreeSet<Metric>,
    pub denominator: DenominatorConvention,
    pub aggregate: AggregateConvention,
    pub all_aggregates: bool,
    pub bpq_d: f64,
    pub bpq_mode: BoundaryMode,
    pub wpq_a: f64,
    pub wpq_d: f64,
    pub match_threshold: f64,
    pub void_fraction_threshold: f64,
    pub void_in_union: bool,
    pub fwpq_basis: FrequencyBasis,
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_inclusive_match: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.into_iter().collect(),
            denominator: DenominatorConvention::Kirillov,
            aggregate: AggregateConvention::MacroClass,
            all_aggregates: false,
            bpq_d: 0.02,
            bpq_mode: BoundaryMode::Boundary,
            wpq_a: 10.0,
            wpq_d: 0.02,
            match_threshold: 0.5,
            void_fraction_threshold: 0.5,
            void_in_union: false,
            fwpq_basis: FrequencyBasis::Pixels,
            inject_inclusive_match: false,
        }
    }
}

impl MetricConfig {
    pub fn check(&self) -> Result<()> {
        self.match_config().check()?;
        boundary::band_radius(self.bpq_d, 1, 1)?;
        boundary::band_radius(self.wpq_d, 1, 1)?;
        if !(self.wpq_a >= 1.0 && self.wpq_a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "wpq a = {} must be >= 1",
                self.wpq_a
            )));
        }
        if !(0.0..=1.0).contains(&self.void_fraction_threshold) {
            return Err(Error::InvalidParameter(format!(
                "void fraction threshold {} outside [0, 1]",
                self.void_fraction_threshold
            )));
        }
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            threshold: self.match_threshold,
            void_in_union: self.void_in_union,
            inclusive: self.inject_inclusive_match,
        }
    }

    pub fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }
}

/// Canonical accumulator at any granularity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub quality_sum: f64,
}

impl PqStats {
    pub fn new(tp: u64, fp: u64, fn_: u64, quality_sum: f64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            quality_sum,
        }
    }

    pub fn is_undefined(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

impl std::ops::AddAssign for PqStats {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
        self.quality_sum += rhs.quality_sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityRatio {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// `(PQ, SQ, RQ)`; `None` when the cell is undefined.
pub fn quality_ratio(s: &PqStats, convention: DenominatorConvention) -> Option<QualityRatio> {
    if s.is_undefined() {
        return None;
    }
    let (tp, fp, fn_) = (s.tp as f64, s.fp as f64, s.fn_ as f64);
    let denom = match convention {
        DenominatorConvention::Kirillov => tp + 0.5 * fp + 0.5 * fn_,
        DenominatorConvention::Eq1Literal => 0.5 * (tp + fp + fn_),
    };
    let sq = if s.tp == 0 { 0.0 } else { s.quality_sum / tp };
    Some(QualityRatio {
        pq: s.quality_sum / denom,
        sq,
        rq: tp / denom,
    })
}

/// Per-class stats of one match result; `quality` supplies the per-TP value.
pub fn pq_stats(
    result: &MatchResult,
    quality: impl Fn(u32, &TpPair) -> f64,
) -> BTreeMap<u32, PqStats> {
    result
        .classes
        .iter()
        .map(|(&class, m)| {
            let sum = m.tp_pairs.iter().map(|t| quality(class, t)).sum();
            (class, PqStats::new(m.tp(), m.fp(), m.fn_(), sum))
        })
        .collect()
}

/// Which per-TP quality a PQ variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Iou,
    Boundary,
    Weighted,
}

/// One (image, class) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CellStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub discarded: u64,
    pub iou_sum: f64,
    pub boundary_sum: f64,
    pub weighted_sum: f64,
    /// Pixels of non-ignored gt segments of this class.
    pub gt_pixels: u64,
}

impl CellStats {
    pub fn gt_count(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn pred_count(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn stats(&self, variant: Variant) -> PqStats {
        let sum = match variant {
            Variant::Iou => self.iou_sum,
            Variant::Boundary => self.boundary_sum,
            Variant::Weighted => self.weighted_sum,
        };
        PqStats::new(self.tp, self.fp, self.fn_, sum)
    }

    fn merge(&mut self, o: &CellStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.discarded += o.discarded;
        self.iou_sum += o.iou_sum;
        self.boundary_sum += o.boundary_sum;
        self.weighted_sum += o.weighted_sum;
        self.gt_pixels += o.gt_pixels;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageEvaluation {
    pub image_id: String,
    pub cells: BTreeMap<u32, CellStats>,
    pub gt_segments: u64,
    pub pred_segments: u64,
}

/// Contingency, matching, void rule and per-TP qualities for one image pair.
pub fn evaluate_image(
    gt: &PanopticAnnotation,
    pred: &PanopticAnnotation,
    config: &MetricConfig,
) -> Result<ImageEvaluation> {
    for (side, ann) in [("gt", gt), ("pred", pred)] {
        if let Some(v) = ann.validate().first() {
            return Err(Error::InvariantViolation(format!(
                "{side} annotation {}: {v}",
                ann.image_id
            )));
        }
    }
    let table = matching::contingency(&gt.label_map, &pred.label_map)?;
    let result =
        matching::match_segments(&table, &gt.segments, &pred.segments, &config.match_config())?;
    let result = matching::apply_void_rule(result, &table, config.void_fraction_threshold);

    let need_masks = config.wants(Metric::Bpq) || config.wants(Metric::Wpq);
    let (gt_masks, pred_masks) = if need_masks {
        (
            boundary::segment_masks(&gt.label_map),
            boundary::segment_masks(&pred.label_map),
        )
    } else {
        Default::default()
    };
    let (w, h) = (gt.width(), gt.height());
    let bpq_radius = boundary::band_radius(config.bpq_d, w, h)?;
    let wpq_radius = boundary::band_radius(config.wpq_d, w, h)?;

    let mut cells = BTreeMap::new();
    for (&class, m) in &result.classes {
        let mut cell = CellStats {
            tp: m.tp(),
            fp: m.fp(),
            fn_: m.fn_(),
            discarded: m.discarded_preds.len() as u64,
            ..Default::default()
        };
        for t in &m.tp_pairs {
            cell.iou_sum += t.iou;
            if need_masks {
                let g = &gt_masks[&t.gt];
                let p = &pred_masks[&t.pred];
                if config.wants(Metric::Bpq) {
                    cell.boundary_sum +=
                        boundary::boundary_quality(g, p, bpq_radius, config.bpq_mode, t.iou)?;
                }
                if config.wants(Metric::Wpq) {
                    let wm = boundary::weight_map(g, config.wpq_a, wpq_radius)?;
                    cell.weighted_sum += boundary::weighted_iou(g, p, &wm)?;
                }
            }
        }
        cells.insert(class, cell);
    }
    for s in gt.segments.iter().filter(|s| !s.ignore) {
        cells.entry(s.class_id).or_default().gt_pixels += s.area;
    }
    Ok(ImageEvaluation {
        image_id: gt.image_id.clone(),
        cells,
        gt_segments: gt.segments.iter().filter(|s| !s.ignore).count() as u64,
        pred_segments: pred.segments.len() as u64,
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Cells pooled per class over all images, in image order.
pub fn pooled_cells(images: &[ImageEvaluation]) -> BTreeMap<u32, CellStats> {
    let mut pooled: BTreeMap<u32, CellStats> = BTreeMap::new();
    for img in images {
        for (&c, cell) in &img.cells {
            pooled.entry(c).or_default().merge(cell);
        }
    }
    pooled
}

fn cell_pq(cell: &CellStats, variant: Variant, conv: DenominatorConvention) -> Option<f64> {
    quality_ratio(&cell.stats(variant), conv).map(|q| q.pq)
}

/// Per-image value: mean over the image's defined class cells.
pub fn image_pq(
    image: &ImageEvaluation,
    variant: Variant,
    conv: DenominatorConvention,
) -> Option<f64> {
    mean(
        image
            .cells
            .values()
            .filter_map(|c| cell_pq(c, variant, conv)),
    )
}

/// PQ (or bPQ / wPQ via `variant`) under the chosen aggregation.
pub fn aggregate_pq(
    images: &[ImageEvaluation],
    variant: Variant,
    conv: DenominatorConvention,
    agg: AggregateConvention,
) -> Option<f64> {
    match agg {
        AggregateConvention::MacroClass => mean(
            pooled_cells(images)
                .values()
                .filter_map(|c| cell_pq(c, variant, conv)),
        ),
        AggregateConvention::MacroImage => {
            mean(images.iter().filter_map(|i| image_pq(i, variant, conv)))
        }
    }
}

pub fn vanilla_pq(
    images: &[ImageEvaluation],
    conv: DenominatorConvention,
    agg: AggregateConvention,
) -> Result<Option<f64>> {
    non_empty(images)?;
    Ok(aggregate_pq(images, Variant::Iou, conv, agg))
}

/// Per class, pool TP/FP/FN and IoU sums over the dataset, then average the
/// class PQs.
pub fn mpq_plus(images: &[ImageEvaluation], conv: DenominatorConvention) -> Result<Option<f64>> {
    non_empty(images)?;
    Ok(aggregate_pq(
        images,
        Variant::Iou,
        conv,
        AggregateConvention::MacroClass,
    ))
}

pub fn bpq(
    images: &[ImageEvaluation],
    conv: DenominatorConvention,
    agg: AggregateConvention,
) -> Result<Option<f64>> {
    non_empty(images)?;
    Ok(aggregate_pq(images, Variant::Boundary, conv, agg))
}

pub fn wpq(
    images: &[ImageEvaluation],
    conv: DenominatorConvention,
    agg: AggregateConvention,
) -> Result<Option<f64>> {
    non_empty(images)?;
    Ok(aggregate_pq(images, Variant::Weighted, conv, agg))
}

/// `Σ_c (t_c / Σ_k t_k) · PQ_c` with pooled class PQs.
pub fn fwpq(
    images: &[ImageEvaluation],
    conv: DenominatorConvention,
    basis: FrequencyBasis,
) -> Result<f64> {
    let pooled = pooled_cells(images);
    let freq = |c: &CellStats| match basis {
        FrequencyBasis::Pixels => c.gt_pixels,
        FrequencyBasis::Instances => c.gt_count(),
    };
    let total: u64 = pooled.values().map(freq).sum();
    if total == 0 {
        return Err(Error::EmptyDataset(
            "fwPQ needs at least one ground-truth pixel".into(),
        ));
    }
    let weighted: f64 = pooled
        .values()
        .filter(|c| freq(c) > 0)
        .map(|c| freq(c) as f64 * cell_pq(c, Variant::Iou, conv).unwrap_or(0.0))
        .sum();
    Ok(weighted / total as f64)
}

/// Per-image iPQ score: classes absent from the image's gt are null. Returns
/// the score (`None` for an image with empty gt) and the number of FPs that
/// fell into null classes.
pub fn ipq_image_score(image: &ImageEvaluation, conv: DenominatorConvention) -> (Option<f64>, u64) {
    let nulled_fp = image
        .cells
        .values()
        .filter(|c| c.gt_count() == 0)
        .map(|c| c.fp)
        .sum();
    let score = mean(
        image
            .cells
            .values()
            .filter(|c| c.gt_count() > 0)
            .filter_map(|c| cell_pq(c, Variant::Iou, conv)),
    );
    (score, nulled_fp)
}

pub fn ipq(images: &[ImageEvaluation], conv: DenominatorConvention) -> Result<f64> {
    mean(images.iter().filter_map(|i| ipq_image_score(i, conv).0))
        .ok_or_else(|| Error::EmptyDataset("no image has a ground-truth segment".into()))
}

/// `1 - Σ(ŷ - y)² / Σ(y - ȳ)²` over `(y, ŷ)` pairs.
pub fn r_squared(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Undefined("R² needs at least two count pairs".into()));
    }
    let ybar = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|p| (p.0 - ybar).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("ground-truth counts are constant".into()));
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.1 - p.0).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// `(gt count, pred count)` for every image and every class that has at
/// least one gt or pred instance somewhere in the dataset.
pub fn count_pairs(images: &[ImageEvaluation]) -> Vec<(f64, f64)> {
    let classes: BTreeSet<u32> = pooled_cells(images)
        .into_iter()
        .filter(|(_, c)| c.gt_count() + c.pred_count() > 0)
        .map(|(k, _)| k)
        .collect();
    let mut pairs = Vec::new();
    for img in images {
        for c in &classes {
            let cell = img.cells.get(c).copied().unwrap_or_default();
            pairs.push((cell.gt_count() as f64, cell.pred_count() as f64));
        }
    }
    pairs
}

fn non_empty(images: &[ImageEvaluation]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images".into()));
    }
    Ok(())
}

fn aggregate_values(
    images: &[ImageEvaluation],
    config: &MetricConfig,
    agg: AggregateConvention,
) -> AggregateValues {
    let conv = config.denominator;
    let on = |m: Metric| config.wants(m);
    AggregateValues {
        pq: on(Metric::Pq)
            .then(|| aggregate_pq(images, Variant::Iou, conv, agg))
            .flatten(),
        mpq_plus: on(Metric::MpqPlus)
            .then(|| aggregate_pq(images, Variant::Iou, conv, AggregateConvention::MacroClass))
            .flatten(),
        bpq: on(Metric::Bpq)
            .then(|| aggregate_pq(images, Variant::Boundary, conv, agg))
            .flatten(),
        ipq: on(Metric::Ipq).then(|| ipq(images, conv).ok()).flatten(),
        wpq: on(Metric::Wpq)
            .then(|| aggregate_pq(images, Variant::Weighted, conv, agg))
            .flatten(),
        fwpq: on(Metric::Fwpq)
            .then(|| fwpq(images, conv, config.fwpq_basis).ok())
            .flatten(),
        r2: on(Metric::R2)
            .then(|| r_squared(&count_pairs(images)).ok())
            .flatten(),
    }
}

/// Assembles the report from per-image evaluations (already in canonical
/// image order).
pub fn build_report(
    images: &[ImageEvaluation],
    errors: Vec<ImageError>,
    warnings: Vec<String>,
    config: &MetricConfig,
) -> Result<MetricReport> {
    non_empty(images)?;
    let conv = config.denominator;
    let aggregate = aggregate_values(images, config, config.aggregate);
    let aggregates_by_convention = config.all_aggregates.then(|| {
        [
            AggregateConvention::MacroClass,
            AggregateConvention::MacroImage,
        ]
        .into_iter()
        .map(|a| {
            let key = match a {
                AggregateConvention::MacroClass => "class",
                AggregateConvention::MacroImage => "image",
            };
            (key.to_string(), aggregate_values(images, config, a))
        })
        .collect()
    });

    let per_class = pooled_cells(images)
        .into_iter()
        .map(|(c, cell)| (c, ClassReport::from_cell(&cell, config)))
        .collect();

    let mut counts = Counts {
        images: images.len() as u64,
        failed_images: errors.len() as u64,
        ..Default::default()
    };
    let per_image = images
        .iter()
        .map(|img| {
            let (ipq_score, nulled_fp) = ipq_image_score(img, conv);
            counts.gt_segments += img.gt_segments;
            counts.pred_segments += img.pred_segments;
            counts.nulled_fp += nulled_fp;
            for cell in img.cells.values() {
                counts.tp += cell.tp;
                counts.fp += cell.fp;
                counts.fn_ += cell.fn_;
                counts.discarded += cell.discarded;
            }
            ImageReport {
                image_id: img.image_id.clone(),
                pq: image_pq(img, Variant::Iou, conv),
                ipq: ipq_score,
                nulled_fp,
                classes: img
                    .cells
                    .iter()
                    .map(|(&c, cell)| (c, ClassReport::from_cell(cell, config)))
                    .collect(),
            }
        })
        .collect();

    let mut report = MetricReport {
        config: config.clone(),
        aggregate,
        aggregates_by_convention,
        per_class,
        per_image,
        counts,
        observations: Vec::new(),
        warnings,
        errors,
        generated_at: None,
    };
    report.observations = ranking_observation(&report.aggregate).into_iter().collect();
    Ok(report)
}

/// Whether wPQ ≥ fwPQ ≥ iPQ ≥ PQ holds on this run. Reported, never enforced.
fn ranking_observation(a: &AggregateValues) -> Option<String> {
    let (w, fw, i, p) = (a.wpq?, a.fwpq?, a.ipq?, a.pq?);
    let holds = w >= fw && fw >= i && i >= p;
    Some(format!(
        "ranking wPQ >= fwPQ >= iPQ >= PQ {}",
        if holds { "holds" } else { "does not hold" }
    ))
}

/// Evaluates aligned `(gt, pred)` pairs on `jobs` worker threads (0 = all
/// cores). Images are reduced in image-id order, so the output is identical
/// for any worker count and any input order.
pub fn evaluate_pairs(
    pairs: &[(PanopticAnnotation, PanopticAnnotation)],
    config: &MetricConfig,
    jobs: usize,
    warnings: Vec<String>,
) -> Result<MetricReport> {
    config.check()?;
    let mut ordered: Vec<&(PanopticAnnotation, PanopticAnnotation)> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));
    let run = || -> Vec<Result<ImageEvaluation>> {
        ordered
            .par_iter()
            .map(|(g, p)| evaluate_image(g, p, config))
            .collect()
    };
    let outcomes = with_pool(jobs, run)?;
    let mut images = Vec::new();
    let mut errors = Vec::new();
    for ((g, _), out) in ordered.iter().copied().zip(outcomes) {
        match out {
            Ok(e) => images.push(e),
            Err(e) => errors.push(ImageError {
                image_id: g.image_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    build_report(&images, errors, warnings, config)
}

pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use DenominatorConvention::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn cell(tp: u64, fp: u64, fn_: u64, iou_sum: f64) -> CellStats {
        CellStats {
            tp,
            fp,
            fn_,
            iou_sum,
            boundary_sum: iou_sum,
            weighted_sum: iou_sum,
            gt_pixels: (tp + fn_) * 10,
            ..Default::default()
        }
    }

    fn image(id: &str, cells: &[(u32, CellStats)]) -> ImageEvaluation {
        ImageEvaluation {
            image_id: id.into(),
            cells: cells.iter().copied().collect(),
            gt_segments: 0,
            pred_segments: 0,
        }
    }

    #[test]
    fn quality_ratio_examples() {
        let q = quality_ratio(&PqStats::new(2, 1, 2, 1.5), Kirillov).unwrap();
        assert!(close(q.pq, 1.5 / 3.5));
        assert!(close(q.sq, 0.75));
        assert!(close(q.rq, 2.0 / 3.5));
        assert!(close(q.pq, q.sq * q.rq));

        let s = PqStats::new(1, 1, 0, 0.6);
        assert!(close(quality_ratio(&s, Kirillov).unwrap().pq, 0.4));
        assert!(close(quality_ratio(&s, Eq1Literal).unwrap().pq, 0.6));
        let q = quality_ratio(&s, Eq1Literal).unwrap();
        assert!(close(q.pq, q.sq * q.rq));

        assert!(quality_ratio(&PqStats::default(), Kirillov).is_none());
        let none_matched = quality_ratio(&PqStats::new(0, 2, 3, 0.0), Kirillov).unwrap();
        assert_eq!((none_matched.pq, none_matched.sq), (0.0, 0.0));
    }

    #[test]
    fn pq_stats_from_match_result() {
        use crate::matching::ClassMatches;
        let mut r = MatchResult::default();
        r.classes.insert(
            1,
            ClassMatches {
                tp_pairs: vec![TpPair {
                    gt: 1,
                    pred: 4,
                    iou: 0.6,
                }],
                fp_preds: vec![5],
                fn_gts: vec![],
                discarded_preds: vec![6],
            },
        );
        r.classes.insert(
            2,
            ClassMatches {
                fn_gts: vec![2, 3, 7],
                ..Default::default()
            },
        );
        let s = pq_stats(&r, |_, t| t.iou);
        assert_eq!(s[&1], PqStats::new(1, 1, 0, 0.6));
        assert_eq!(s[&2], PqStats::new(0, 0, 3, 0.0));
    }

    #[test]
    fn mpq_plus_pools_before_dividing() {
        let imgs = [
            image("a", &[(1, cell(1, 0, 0, 0.8))]),
            image("b", &[(1, cell(1, 2, 0, 0.6))]),
        ];
        let v = mpq_plus(&imgs, Kirillov).unwrap().unwrap();
        assert!(close(v, 1.4 / 3.0));
        // per-image averaging gives (0.8 + 0.3) / 2 instead
        let by_image = vanilla_pq(&imgs, Kirillov, AggregateConvention::MacroImage)
            .unwrap()
            .unwrap();
        assert!(close(by_image, 0.55));
    }

    #[test]
    fn fwpq_weights_by_gt_pixels() {
        // class 1: 300 px, PQ 0.8; class 2: 100 px, PQ 0.4
        let mut a = cell(1, 0, 0, 0.8);
        a.gt_pixels = 300;
        let mut b = cell(1, 1, 1, 0.8);
        b.gt_pixels = 100;
        let imgs = [image("a", &[(1, a), (2, b)])];
        assert!(close(
            quality_ratio(&b.stats(Variant::Iou), Kirillov).unwrap().pq,
            0.4
        ));
        assert!(close(
            fwpq(&imgs, Kirillov, FrequencyBasis::Pixels).unwrap(),
            0.7
        ));
        assert!(fwpq(&[image("e", &[])], Kirillov, FrequencyBasis::Pixels).is_err());
    }

    #[test]
    fn ipq_nulls_classes_absent_from_gt() {
        // class 2 predicted but absent from gt of this image
        let img = image("a", &[(1, cell(2, 0, 0, 1.6)), (2, cell(0, 3, 0, 0.0))]);
        let (score, nulled) = ipq_image_score(&img, Kirillov);
        assert!(close(score.unwrap(), 0.8));
        assert_eq!(nulled, 3);
        let empty_gt = image("b", &[(2, cell(0, 1, 0, 0.0))]);
        assert_eq!(ipq_image_score(&empty_gt, Kirillov).0, None);
        assert!(ipq(&[empty_gt], Kirillov).is_err());
    }

    #[test]
    fn ipq_is_mean_of_image_scores() {
        let imgs = [
            image("a", &[(1, cell(1, 0, 0, 0.6))]),
            image("b", &[(1, cell(1, 0, 0, 0.8))]),
        ];
        assert!(close(ipq(&imgs, Kirillov).unwrap(), 0.7));
    }

    #[test]
    fn r_squared_examples() {
        let pairs = [(2.0, 3.0), (4.0, 3.0), (6.0, 6.0)];
        assert!(close(r_squared(&pairs).unwrap(), 0.75));
        let exact = [(1.0, 1.0), (5.0, 5.0)];
        assert_eq!(r_squared(&exact).unwrap(), 1.0);
        let null_model = [(2.0, 4.0), (4.0, 4.0), (6.0, 4.0)];
        assert_eq!(r_squared(&null_model).unwrap(), 0.0);
        assert!(r_squared(&[(3.0, 3.0), (3.0, 2.0)]).is_err());
        assert!(r_squared(&[(3.0, 3.0)]).is_err());
    }

    #[test]
    fn undefined_cells_are_excluded() {
        let only_discarded = CellStats {
            discarded: 2,
            ..Default::default()
        };
        let imgs = [image("a", &[(1, cell(1, 0, 0, 0.9)), (2, only_discarded)])];
        for agg in [
            AggregateConvention::MacroClass,
            AggregateConvention::MacroImage,
        ] {
            assert!(close(
                vanilla_pq(&imgs, Kirillov, agg).unwrap().unwrap(),
                0.9
            ));
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            vanilla_pq(&[], Kirillov, AggregateConvention::MacroClass),
            Err(Error::EmptyDataset(_))
        ));
        assert!(mpq_plus(&[], Kirillov).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("dice".parse::<Metric>().is_err());
    }
}
