//! Brute-force reference implementations used by tests and `selftest`.
//!
//! Everything here works on explicit pixel sets with naive loops and shares
//! nothing with the fast path except the domain types, the config and the
//! report layout. Frame sizes are capped so the quadratic costs stay small.

use std::collections::{BTreeMap, BTreeSet};

use crate::boundary::{BoundaryBand, BoundaryMode, Mask};
use crate::matching::ContingencyTable;
use crate::metrics::{
    AggregateConvention, DenominatorConvention, FrequencyBasis, Metric, MetricConfig,
};
use crate::report::{AggregateValues, ClassReport, Counts, ImageReport, MetricReport};
use crate::segmap::{LabelMap, PanopticAnnotation};
use crate::{Error, Result};

pub const MAX_CONTINGENCY_FRAME: usize = 128;
pub const MAX_BAND_FRAME: usize = 64;

/// Explicit coordinate set of one segment.
pub type PixelSet = BTreeSet<(i64, i64)>;

fn guard(width: usize, height: usize, limit: usize) -> Result<()> {
    if width > limit || height > limit {
        return Err(Error::FrameTooLarge {
            width,
            height,
            limit,
        });
    }
    Ok(())
}

/// `segment id -> pixels`, plus the void pixels under key 0.
pub fn pixel_sets(map: &LabelMap) -> BTreeMap<u32, PixelSet> {
    let mut sets: BTreeMap<u32, PixelSet> = BTreeMap::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            sets.entry(map.instance_at(x, y))
                .or_default()
                .insert((x as i64, y as i64));
        }
    }
    sets
}

pub fn oracle_contingency(gt: &LabelMap, pred: &LabelMap) -> Result<ContingencyTable> {
    guard(gt.width(), gt.height(), MAX_CONTINGENCY_FRAME)?;
    guard(pred.width(), pred.height(), MAX_CONTINGENCY_FRAME)?;
    if (gt.width(), gt.height()) != (pred.width(), pred.height()) {
        return Err(Error::DimensionMismatch("frames differ".into()));
    }
    let gs = pixel_sets(gt);
    let ps = pixel_sets(pred);
    let mut t = ContingencyTable {
        width: gt.width(),
        height: gt.height(),
        ..Default::default()
    };
    for (&g, gset) in &gs {
        for (&p, pset) in &ps {
            let n = gset.intersection(pset).count() as u64;
            if n == 0 {
                continue;
            }
            match (g, p) {
                (0, 0) => t.void_void = n,
                (0, p) => {
                    t.pred_void.insert(p, n);
                }
                (g, 0) => {
                    t.gt_void.insert(g, n);
                }
                (g, p) => {
                    t.pairs.insert((g, p), n);
                }
            }
        }
    }
    for (&g, s) in gs.iter().filter(|(&g, _)| g != 0) {
        t.gt_area.insert(g, s.len() as u64);
    }
    for (&p, s) in ps.iter().filter(|(&p, _)| p != 0) {
        t.pred_area.insert(p, s.len() as u64);
    }
    Ok(t)
}

fn d2(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)
}

fn near(d2: i64, r: u32) -> bool {
    let r = r as i64;
    d2 <= r * (r + 1)
}

/// Pixels of `set` within radius of some pixel outside it; everything beyond
/// the frame counts as outside.
fn inner_band_set(set: &PixelSet, width: usize, height: usize, r: u32) -> PixelSet {
    let (w, h) = (width as i64, height as i64);
    let outside: Vec<(i64, i64)> = (-1..=h)
        .flat_map(|y| (-1..=w).map(move |x| (x, y)))
        .filter(|p| !set.contains(p))
        .collect();
    set.iter()
        .copied()
        .filter(|&p| outside.iter().any(|&q| near(d2(p, q), r)))
        .collect()
}

/// In-frame pixels outside `set` within radius of some pixel of it.
fn outer_band_set(set: &PixelSet, width: usize, height: usize, r: u32) -> PixelSet {
    let mut out = PixelSet::new();
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let p = (x, y);
            if !set.contains(&p) && set.iter().any(|&q| near(d2(p, q), r)) {
                out.insert(p);
            }
        }
    }
    out
}

pub fn oracle_band(mask: &Mask, radius_px: u32) -> Result<BoundaryBand> {
    let (fw, fh) = mask.frame();
    guard(fw, fh, MAX_BAND_FRAME)?;
    let set: PixelSet = mask.pixels().map(|(x, y)| (x as i64, y as i64)).collect();
    let band = inner_band_set(&set, fw, fh, radius_px);
    Ok(BoundaryBand {
        band: Mask::from_fn(fw, fh, |x, y| band.contains(&(x as i64, y as i64))),
        radius_px,
    })
}

fn radius(d: f64, width: usize, height: usize) -> u32 {
    let diag = ((width as f64).powi(2) + (height as f64).powi(2)).sqrt();
    let r = (d * diag).round();
    if r < 1.0 {
        1
    } else {
        r as u32
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    tp: u64,
    fp: u64,
    fn_: u64,
    discarded: u64,
    iou: f64,
    biou: f64,
    wiou: f64,
    gt_pixels: u64,
}

impl Cell {
    fn add(&mut self, o: &Cell) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.discarded += o.discarded;
        self.iou += o.iou;
        self.biou += o.biou;
        self.wiou += o.wiou;
        self.gt_pixels += o.gt_pixels;
    }

    fn sum(&self, which: usize) -> f64 {
        [self.iou, self.biou, self.wiou][which]
    }
}

fn pq(c: &Cell, which: usize, conv: DenominatorConvention) -> Option<f64> {
    let n = c.tp + c.fp + c.fn_;
    if n == 0 {
        return None;
    }
    let denom = match conv {
        DenominatorConvention::Kirillov => c.tp as f64 + (c.fp + c.fn_) as f64 / 2.0,
        DenominatorConvention::Eq1Literal => n as f64 / 2.0,
    };
    Some(c.sum(which) / denom)
}

fn avg(v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct Seg {
    id: u32,
    class: u32,
    pixels: PixelSet,
}

fn oracle_image(
    gt: &PanopticAnnotation,
    pred: &PanopticAnnotation,
    config: &MetricConfig,
) -> Result<BTreeMap<u32, Cell>> {
    let (w, h) = (gt.width(), gt.height());
    guard(w, h, MAX_CONTINGENCY_FRAME)?;
    let need_bands = config.metrics.contains(&Metric::Bpq) || config.metrics.contains(&Metric::Wpq);
    if need_bands {
        guard(w, h, MAX_BAND_FRAME)?;
    }
    let gsets = pixel_sets(&gt.label_map);
    let psets = pixel_sets(&pred.label_map);
    let empty = PixelSet::new();
    let gt_void = gsets.get(&0).unwrap_or(&empty);

    let mut gts = Vec::new();
    let mut crowd = Vec::new();
    for s in &gt.segments {
        let seg = Seg {
            id: s.segment_id,
            class: s.class_id,
            pixels: gsets.get(&s.segment_id).cloned().unwrap_or_default(),
        };
        if s.ignore {
            crowd.push(seg);
        } else {
            gts.push(seg);
        }
    }
    let preds: Vec<Seg> = pred
        .segments
        .iter()
        .map(|s| Seg {
            id: s.segment_id,
            class: s.class_id,
            pixels: psets.get(&s.segment_id).cloned().unwrap_or_default(),
        })
        .collect();

    // every admissible (gt, pred) pair with its IoU
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            if g.class != p.class {
                continue;
            }
            let inter = g.pixels.intersection(&p.pixels).count();
            if inter == 0 {
                continue;
            }
            let union_set: PixelSet = if config.void_in_union {
                g.pixels
                    .union(&p.pixels.difference(gt_void).copied().collect())
                    .copied()
                    .collect()
            } else {
                g.pixels.union(&p.pixels).copied().collect()
            };
            let v = inter as f64 / union_set.len() as f64;
            // the fault-injection switch is deliberately ignored here
            if v > config.match_threshold {
                cands.push((v, gi, pi));
            }
        }
    }
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut matches = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for &(v, gi, pi) in &cands {
            if gt_used[gi] || pred_used[pi] {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, bg, bp)) => {
                    v > bv
                        || (v == bv && preds[pi].id < preds[bp].id)
                        || (v == bv && pi == bp && gts[gi].id < gts[bg].id)
                }
            };
            if better {
                best = Some((v, gi, pi));
            }
        }
        let Some((v, gi, pi)) = best else { break };
        gt_used[gi] = true;
        pred_used[pi] = true;
        matches.push((v, gi, pi));
    }

    let mut cells: BTreeMap<u32, Cell> = BTreeMap::new();
    for g in &gts {
        let c = cells.entry(g.class).or_default();
        c.gt_pixels += g.pixels.len() as u64;
    }
    for (gi, g) in gts.iter().enumerate() {
        if !gt_used[gi] {
            cells.entry(g.class).or_default().fn_ += 1;
        }
    }
    for (pi, p) in preds.iter().enumerate() {
        let c = cells.entry(p.class).or_default();
        if pred_used[pi] {
            continue;
        }
        let mut ignored = p.pixels.intersection(gt_void).count();
        for cr in crowd.iter().filter(|cr| cr.class == p.class) {
            ignored += p.pixels.intersection(&cr.pixels).count();
        }
        if !p.pixels.is_empty()
            && ignored as f64 / p.pixels.len() as f64 > config.void_fraction_threshold
        {
            c.discarded += 1;
        } else {
            c.fp += 1;
        }
    }

    let br = radius(config.bpq_d, w, h);
    let wr = radius(config.wpq_d, w, h);
    // quality sums in (gt id, pred id) order
    matches.sort_by_key(|&(_, gi, pi)| (gts[gi].id, preds[pi].id));
    for (v, gi, pi) in matches {
        let (g, p) = (&gts[gi], &preds[pi]);
        let c = cells.get_mut(&g.class).expect("class cell exists");
        c.tp += 1;
        c.iou += v;
        if config.metrics.contains(&Metric::Bpq) {
            let bg = inner_band_set(&g.pixels, w, h, br);
            let bp = inner_band_set(&p.pixels, w, h, br);
            let inter = bg.intersection(&bp).count();
            let union = bg.union(&bp).count();
            let b = inter as f64 / union as f64;
            c.biou += match config.bpq_mode {
                BoundaryMode::Boundary => b,
                BoundaryMode::Min => b.min(v),
            };
        }
        if config.metrics.contains(&Metric::Wpq) {
            let mut heavy = inner_band_set(&g.pixels, w, h, wr);
            heavy.extend(outer_band_set(&g.pixels, w, h, wr));
            let weight = |q: &(i64, i64)| {
                if heavy.contains(q) {
                    config.wpq_a
                } else {
                    1.0
                }
            };
            let num: f64 = g.pixels.intersection(&p.pixels).map(weight).sum();
            let den: f64 = g.pixels.union(&p.pixels).map(weight).sum();
            c.wiou += num / den;
        }
    }
    Ok(cells)
}

fn aggregate(
    images: &[(String, BTreeMap<u32, Cell>)],
    config: &MetricConfig,
    agg: AggregateConvention,
) -> AggregateValues {
    let conv = config.denominator;
    let mut pooled: BTreeMap<u32, Cell> = BTreeMap::new();
    for (_, cells) in images {
        for (&k, c) in cells {
            pooled.entry(k).or_default().add(c);
        }
    }
    let by_class = |which: usize| avg(pooled.values().filter_map(|c| pq(c, which, conv)).collect());
    let by_image = |which: usize| {
        avg(images
            .iter()
            .filter_map(|(_, cells)| {
                avg(cells.values().filter_map(|c| pq(c, which, conv)).collect())
            })
            .collect())
    };
    let family = |which: usize| match agg {
        AggregateConvention::MacroClass => by_class(which),
        AggregateConvention::MacroImage => by_image(which),
    };

    let ipq = avg(images
        .iter()
        .filter_map(|(_, cells)| {
            avg(cells
                .values()
                .filter(|c| c.tp + c.fn_ > 0)
                .filter_map(|c| pq(c, 0, conv))
                .collect())
        })
        .collect());

    let freq = |c: &Cell| match config.fwpq_basis {
        FrequencyBasis::Pixels => c.gt_pixels,
        FrequencyBasis::Instances => c.tp + c.fn_,
    };
    let total: u64 = pooled.values().map(freq).sum();
    let fwpq = (total > 0).then(|| {
        pooled
            .values()
            .map(|c| {
                let f = freq(c);
                if f == 0 {
                    0.0
                } else {
                    f as f64 * pq(c, 0, conv).unwrap_or(0.0)
                }
            })
            .sum::<f64>()
            / total as f64
    });

    let mut ys = Vec::new();
    for (&k, pc) in &pooled {
        if pc.tp + pc.fn_ + pc.tp + pc.fp == 0 {
            continue;
        }
        for (_, cells) in images {
            let c = cells.get(&k).copied().unwrap_or_default();
            ys.push(((c.tp + c.fn_) as f64, (c.tp + c.fp) as f64));
        }
    }
    let r2 = if ys.len() < 2 {
        None
    } else {
        let mean_y = ys.iter().map(|p| p.0).sum::<f64>() / ys.len() as f64;
        let tot: f64 = ys.iter().map(|p| (p.0 - mean_y) * (p.0 - mean_y)).sum();
        let res: f64 = ys.iter().map(|p| (p.1 - p.0) * (p.1 - p.0)).sum();
        (tot != 0.0).then(|| 1.0 - res / tot)
    };

    let on = |m: Metric| config.metrics.contains(&m);
    AggregateValues {
        pq: on(Metric::Pq).then(|| family(0)).flatten(),
        mpq_plus: on(Metric::MpqPlus).then(|| by_class(0)).flatten(),
        bpq: on(Metric::Bpq).then(|| family(1)).flatten(),
        ipq: on(Metric::Ipq).then_some(ipq).flatten(),
        wpq: on(Metric::Wpq).then(|| family(2)).flatten(),
        fwpq: on(Metric::Fwpq).then_some(fwpq).flatten(),
        r2: on(Metric::R2).then_some(r2).flatten(),
    }
}

fn class_report(c: &Cell, config: &MetricConfig) -> ClassReport {
    let conv = config.denominator;
    let p = pq(c, 0, conv);
    let rq = p.map(|_| {
        c.tp as f64
            / match conv {
                DenominatorConvention::Kirillov => c.tp as f64 + (c.fp + c.fn_) as f64 / 2.0,
                DenominatorConvention::Eq1Literal => (c.tp + c.fp + c.fn_) as f64 / 2.0,
            }
    });
    let sq = p.map(|_| if c.tp == 0 { 0.0 } else { c.iou / c.tp as f64 });
    ClassReport {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        discarded: c.discarded,
        gt_pixels: c.gt_pixels,
        pq: p,
        sq,
        rq,
        bpq: config
            .metrics
            .contains(&Metric::Bpq)
            .then(|| pq(c, 1, conv))
            .flatten(),
        wpq: config
            .metrics
            .contains(&Metric::Wpq)
            .then(|| pq(c, 2, conv))
            .flatten(),
    }
}

/// The full report from pixel sets. `pairs` are aligned `(gt, pred)`
/// annotations; they are evaluated in image-id order.
pub fn oracle_metrics(
    pairs: &[(PanopticAnnotation, PanopticAnnotation)],
    config: &MetricConfig,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no images".into()));
    }
    let mut order: Vec<&(PanopticAnnotation, PanopticAnnotation)> = pairs.iter().collect();
    order.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));
    let mut images = Vec::new();
    let mut counts = Counts::default();
    for (g, p) in order {
        let cells = oracle_image(g, p, config)?;
        counts.images += 1;
        counts.gt_segments += g.segments.iter().filter(|s| !s.ignore).count() as u64;
        counts.pred_segments += p.segments.len() as u64;
        images.push((g.image_id.clone(), cells));
    }
    let conv = config.denominator;
    let mut per_image = Vec::new();
    let mut pooled: BTreeMap<u32, Cell> = BTreeMap::new();
    for (id, cells) in &images {
        let mut nulled = 0;
        for (&k, c) in cells {
            pooled.entry(k).or_default().add(c);
            counts.tp += c.tp;
            counts.fp += c.fp;
            counts.fn_ += c.fn_;
            counts.discarded += c.discarded;
            if c.tp + c.fn_ == 0 {
                nulled += c.fp;
            }
        }
        counts.nulled_fp += nulled;
        per_image.push(ImageReport {
            image_id: id.clone(),
            pq: avg(cells.values().filter_map(|c| pq(c, 0, conv)).collect()),
            ipq: avg(cells
                .values()
                .filter(|c| c.tp + c.fn_ > 0)
                .filter_map(|c| pq(c, 0, conv))
                .collect()),
            nulled_fp: nulled,
            classes: cells
                .iter()
                .map(|(&k, c)| (k, class_report(c, config)))
                .collect(),
        });
    }
    let aggregates_by_convention = config.all_aggregates.then(|| {
        [
            ("class", AggregateConvention::MacroClass),
            ("image", AggregateConvention::MacroImage),
        ]
        .into_iter()
        .map(|(k, a)| (k.to_string(), aggregate(&images, config, a)))
        .collect()
    });
    Ok(MetricReport {
        config: config.clone(),
        aggregate: aggregate(&images, config, config.aggregate),
        aggregates_by_convention,
        per_class: pooled
            .iter()
            .map(|(&k, c)| (k, class_report(c, config)))
            .collect(),
        per_image,
        counts,
        observations: Vec::new(),
        warnings: Vec::new(),
        errors: Vec::new(),
        generated_at: None,
    })
}

fn diff_value(out: &mut Vec<String>, what: &str, a: Option<f64>, b: Option<f64>, tol: f64) {
    let same = match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    };
    if !same {
        out.push(format!("{what}: {a:?} vs {b:?}"));
    }
}

fn diff_class(out: &mut Vec<String>, scope: &str, a: &ClassReport, b: &ClassReport, tol: f64) {
    if (a.tp, a.fp, a.fn_, a.discarded, a.gt_pixels)
        != (b.tp, b.fp, b.fn_, b.discarded, b.gt_pixels)
    {
        out.push(format!("{scope}: counts {a:?} vs {b:?}"));
    }
    for (name, x, y) in [
        ("pq", a.pq, b.pq),
        ("sq", a.sq, b.sq),
        ("rq", a.rq, b.rq),
        ("bpq", a.bpq, b.bpq),
        ("wpq", a.wpq, b.wpq),
    ] {
        diff_value(out, &format!("{scope} {name}"), x, y, tol);
    }
}

fn diff_aggregate(
    out: &mut Vec<String>,
    scope: &str,
    a: &AggregateValues,
    b: &AggregateValues,
    tol: f64,
) {
    for ((name, x), (_, y)) in a.columns().into_iter().zip(b.columns()) {
        diff_value(out, &format!("{scope} {name}"), x, y, tol);
    }
}

/// Differences between two reports beyond `tol`; empty when they agree.
/// Warnings and observations are not compared.
pub fn compare_reports(fast: &MetricReport, oracle: &MetricReport, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    diff_aggregate(
        &mut out,
        "aggregate",
        &fast.aggregate,
        &oracle.aggregate,
        tol,
    );
    match (
        &fast.aggregates_by_convention,
        &oracle.aggregates_by_convention,
    ) {
        (Some(a), Some(b)) => {
            for (k, av) in a {
                match b.get(k) {
                    Some(bv) => diff_aggregate(&mut out, k, av, bv, tol),
                    None => out.push(format!("aggregate {k} missing from oracle")),
                }
            }
        }
        (None, None) => {}
        _ => out.push("aggregates_by_convention present on one side only".into()),
    }
    if fast.counts.tp != oracle.counts.tp
        || fast.counts.fp != oracle.counts.fp
        || fast.counts.fn_ != oracle.counts.fn_
        || fast.counts.discarded != oracle.counts.discarded
        || fast.counts.nulled_fp != oracle.counts.nulled_fp
        || fast.counts.images != oracle.counts.images
    {
        out.push(format!("counts {:?} vs {:?}", fast.counts, oracle.counts));
    }
    let fk: Vec<_> = fast.per_class.keys().collect();
    let ok: Vec<_> = oracle.per_class.keys().collect();
    if fk != ok {
        out.push(format!("class sets {fk:?} vs {ok:?}"));
    }
    for (k, a) in &fast.per_class {
        if let Some(b) = oracle.per_class.get(k) {
            diff_class(&mut out, &format!("class {k}"), a, b, tol);
        }
    }
    if fast.per_image.len() != oracle.per_image.len() {
        out.push(format!(
            "{} images vs {}",
            fast.per_image.len(),
            oracle.per_image.len()
        ));
    }
    for (a, b) in fast.per_image.iter().zip(&oracle.per_image) {
        let scope = format!("image {}", a.image_id);
        if a.image_id != b.image_id {
            out.push(format!("{scope}: oracle has {}", b.image_id));
            continue;
        }
        diff_value(&mut out, &format!("{scope} pq"), a.pq, b.pq, tol);
        diff_value(&mut out, &format!("{scope} ipq"), a.ipq, b.ipq, tol);
        if a.nulled_fp != b.nulled_fp {
            out.push(format!(
                "{scope} nulled fp {} vs {}",
                a.nulled_fp, b.nulled_fp
            ));
        }
        if a.classes.keys().ne(b.classes.keys()) {
            out.push(format!("{scope}: class sets differ"));
        }
        for (k, ca) in &a.classes {
            if let Some(cb) = b.classes.get(k) {
                diff_class(&mut out, &format!("{scope} class {k}"), ca, cb, tol);
            }
        }
    }
    out
}
