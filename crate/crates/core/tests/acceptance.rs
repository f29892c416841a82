//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use pqsuite::matching::{contingency, match_segments, MatchConfig};
use pqsuite::metrics::{
    self, evaluate_pairs, quality_ratio, AggregateConvention, CellStats, DenominatorConvention,
    ImageEvaluation, PqStats,
};
use pqsuite::oracle::{compare_reports, oracle_metrics};
use pqsuite::panoptic_io::{
    decode_panoptic_png, encode_panoptic_png, evaluate_dataset, write_dataset, Dataset, IdMap,
    ImageSetPolicy, MAX_ID,
};
use pqsuite::synth::{
    derive_seed, generate_dataset, generate_scene, perturb, perturb_all, random_perturbations,
    Perturbation, PerturbationKind, SceneSpec,
};
use pqsuite::{LabelMap, MetricConfig, PanopticAnnotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pairs_for(
    gts: &[PanopticAnnotation],
    pseed: u64,
) -> Vec<(PanopticAnnotation, PanopticAnnotation)> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| {
            let ps = random_perturbations(derive_seed(pseed, &[i as u64]));
            (g.clone(), perturb_all(g, &ps).unwrap())
        })
        .collect()
}

/// Reference (PQ, SQ, RQ) per class, in percent.
const DECOMPOSITION: [(&str, f64, f64, f64); 8] = [
    ("Mask2Former epithelial", 53.31, 78.70, 67.74),
    ("Mask2Former lymphocyte", 50.76, 77.03, 65.90),
    ("Mask2Former neutrophil", 40.30, 79.46, 50.72),
    ("Mask2Former macrophage", 14.67, 77.52, 18.92),
    ("PanopMamba epithelial", 78.46, 89.06, 88.10),
    ("PanopMamba lymphocyte", 79.26, 90.72, 87.37),
    ("PanopMamba neutrophil", 76.42, 91.56, 83.47),
    ("PanopMamba macrophage", 58.27, 81.59, 71.43),
];

/// Counts whose SQ and RQ equal the given fractions (up to rounding of the
/// unmatched count at a million TPs).
fn stats_for(sq: f64, rq: f64) -> PqStats {
    let tp = 1_000_000u64;
    let unmatched = (2.0 * tp as f64 * (1.0 / rq - 1.0)).round() as u64;
    PqStats::new(tp, unmatched / 2, unmatched - unmatched / 2, sq * tp as f64)
}

fn c1_decomposition() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, pq, sq, rq) in DECOMPOSITION {
        let q = quality_ratio(
            &stats_for(sq / 100.0, rq / 100.0),
            DenominatorConvention::Kirillov,
        )
        .unwrap();
        let got = 100.0 * q.pq;
        let err = (got - pq).abs();
        worst = worst.max(err);
        ensure(err <= 0.01, || {
            format!("{name}: {sq} x {rq} gives {got:.4}, expected {pq}")
        })?;
    }
    Ok(format!("8 rows, max |diff| {worst:.4} pp"))
}

/// Cells whose class PQs are the given values: one TP per class with that
/// IoU and nothing unmatched.
fn cells_with_pq(values: &[f64]) -> ImageEvaluation {
    let cells = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            (
                k as u32 + 1,
                CellStats {
                    tp: 1,
                    iou_sum: v,
                    ..Default::default()
                },
            )
        })
        .collect();
    ImageEvaluation {
        image_id: "table".into(),
        cells,
        gt_segments: values.len() as u64,
        pred_segments: values.len() as u64,
    }
}

fn c2_class_average() -> Outcome {
    let rows = [
        ("PanopMamba", [78.46, 79.26, 76.42, 58.28], 73.11),
        ("Mask2Former", [53.30, 50.76, 40.30, 14.67], 39.76),
    ];
    let mut detail = Vec::new();
    for (name, per_class, expected) in rows {
        let img = cells_with_pq(&per_class.map(|v| v / 100.0));
        let v = metrics::vanilla_pq(
            &[img],
            DenominatorConvention::Kirillov,
            AggregateConvention::MacroClass,
        )
        .map_err(|e| e.to_string())?
        .unwrap()
            * 100.0;
        ensure((v - expected).abs() <= 0.01, || {
            format!("{name}: class mean {v:.4}, expected {expected}")
        })?;
        detail.push(format!("{name} {v:.4}"));
    }
    Ok(detail.join(", "))
}

fn c3_identity() -> Outcome {
    let spec = SceneSpec {
        seed: 3,
        width: 48,
        height: 48,
        ..Default::default()
    };
    let scenes = generate_dataset(&spec, 50).map_err(|e| e.to_string())?;
    let pairs: Vec<_> = scenes.iter().map(|s| (s.clone(), s.clone())).collect();
    let report =
        evaluate_pairs(&pairs, &MetricConfig::default(), 0, vec![]).map_err(|e| e.to_string())?;
    for (name, v) in report.aggregate.columns() {
        ensure(v == Some(1.0), || format!("{name} = {v:?}"))?;
    }
    Ok("50 scenes, all seven metrics exactly 1".into())
}

fn c4_oracle() -> Outcome {
    let mut scenes = 0;
    let mut comparisons = 0;
    let mut totals = [0u64; 4];
    for bank in 0..50u64 {
        let spec = SceneSpec {
            seed: derive_seed(4, &[bank]),
            width: 32,
            height: 32,
            num_classes: 1 + (bank % 3) as u32,
            instances: (0, 3),
            radius: (1.5, 4.5),
            ..Default::default()
        };
        let mut gts = generate_dataset(&spec, 4).map_err(|e| e.to_string())?;
        // mark some gt segments as crowd regions
        let mut rng = ChaCha8Rng::seed_from_u64(bank);
        for g in &mut gts {
            for s in &mut g.segments {
                s.ignore = rng.random_bool(0.1);
            }
        }
        scenes += gts.len();
        let pairs = pairs_for(&gts, derive_seed(40, &[bank]));
        for denominator in [
            DenominatorConvention::Kirillov,
            DenominatorConvention::Eq1Literal,
        ] {
            let config = MetricConfig {
                denominator,
                all_aggregates: true,
                bpq_mode: if bank % 2 == 0 {
                    pqsuite::boundary::BoundaryMode::Boundary
                } else {
                    pqsuite::boundary::BoundaryMode::Min
                },
                void_in_union: bank % 5 == 0,
                wpq_a: [10.0, 1.0, 2.5][bank as usize % 3],
                ..Default::default()
            };
            let fast = evaluate_pairs(&pairs, &config, 2, vec![]).map_err(|e| e.to_string())?;
            ensure(fast.errors.is_empty(), || {
                format!("bank {bank}: {:?}", fast.errors)
            })?;
            let slow = oracle_metrics(&pairs, &config).map_err(|e| e.to_string())?;
            let diffs = compare_reports(&fast, &slow, 1e-12);
            ensure(diffs.is_empty(), || {
                format!("bank {bank} {denominator:?}: {}", diffs.join("; "))
            })?;
            comparisons += 1;
            let c = fast.counts;
            for (t, v) in totals.iter_mut().zip([c.tp, c.fp, c.fn_, c.discarded]) {
                *t += v;
            }
        }
    }
    ensure(totals.iter().all(|&t| t > 0), || {
        format!("degenerate fixtures {totals:?}")
    })?;
    Ok(format!(
        "{scenes} scenes in {comparisons} dataset comparisons (tp/fp/fn/discarded {totals:?}), both denominators and aggregations agree within 1e-12"
    ))
}

fn c5_matching() -> Outcome {
    let mut checked = 0;
    for seed in 0..300u64 {
        let spec = SceneSpec {
            seed,
            num_classes: 3,
            instances: (0, 4),
            radius: (1.5, 4.0),
            ..Default::default()
        };
        let gt = generate_scene(&spec).map_err(|e| e.to_string())?;
        let pred = perturb_all(&gt, &random_perturbations(seed ^ 0xabc)).unwrap();
        let table = contingency(&gt.label_map, &pred.label_map).map_err(|e| e.to_string())?;
        let r = match_segments(
            &table,
            &gt.segments,
            &pred.segments,
            &MatchConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let r = pqsuite::matching::apply_void_rule(r, &table, 0.5);
        let mut seen_gt = BTreeMap::new();
        let mut seen_pred = BTreeMap::new();
        for (&class, m) in &r.classes {
            for t in &m.tp_pairs {
                ensure(seen_gt.insert(t.gt, class).is_none(), || {
                    format!("seed {seed}: gt {} matched twice", t.gt)
                })?;
                ensure(seen_pred.insert(t.pred, class).is_none(), || {
                    format!("seed {seed}: pred {} matched twice", t.pred)
                })?;
            }
            let gt_count = gt
                .segments
                .iter()
                .filter(|s| s.class_id == class && !s.ignore)
                .count() as u64;
            let pred_count = pred.segments.iter().filter(|s| s.class_id == class).count() as u64;
            ensure(m.tp() + m.fn_() == gt_count, || {
                format!("seed {seed} class {class}: tp + fn != gt count")
            })?;
            ensure(
                m.tp() + m.fp() + m.discarded_preds.len() as u64 == pred_count,
                || format!("seed {seed} class {class}: tp + fp + discarded != pred count"),
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "300 scenes, {checked} class cells, no double match, counts conserved"
    ))
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

fn c6_limits() -> Outcome {
    for seed in 0..20u64 {
        let spec = SceneSpec {
            seed: derive_seed(6, &[seed]),
            ..Default::default()
        };
        let gt = generate_scene(&spec).map_err(|e| e.to_string())?;
        let pred = perturb_all(&gt, &random_perturbations(seed)).unwrap();
        let pairs = [(gt.clone(), pred)];

        let a1 = MetricConfig {
            wpq_a: 1.0,
            bpq_d: 1.0,
            ..Default::default()
        };
        let r = evaluate_pairs(&pairs, &a1, 1, vec![]).map_err(|e| e.to_string())?;
        let pq = r.aggregate.pq;
        ensure(close(r.aggregate.wpq, pq), || {
            format!("seed {seed}: wPQ(a=1) {:?} vs PQ {pq:?}", r.aggregate.wpq)
        })?;
        ensure(close(r.aggregate.bpq, pq), || {
            format!("seed {seed}: bPQ(d=1) {:?} vs PQ {pq:?}", r.aggregate.bpq)
        })?;

        let single = SceneSpec {
            num_classes: 1,
            instances: (1, 5),
            ..spec.clone()
        };
        let g1 = generate_scene(&single).map_err(|e| e.to_string())?;
        let p1 = perturb(&g1, &Perturbation::new(PerturbationKind::Drop, 0.3, seed)).unwrap();
        let p1 = perturb(&p1, &Perturbation::new(PerturbationKind::Shift, 1.0, seed)).unwrap();
        let r = evaluate_pairs(&[(g1, p1)], &MetricConfig::default(), 1, vec![])
            .map_err(|e| e.to_string())?;
        ensure(close(r.aggregate.fwpq, r.aggregate.pq), || {
            format!(
                "seed {seed}: single-class fwPQ {:?} vs PQ {:?}",
                r.aggregate.fwpq, r.aggregate.pq
            )
        })?;

        // growing every disk by one pixel keeps all matches (IoU > 1/2)
        let grown = perturb(&gt, &Perturbation::new(PerturbationKind::Dilate, 1.0, 0)).unwrap();
        let r = evaluate_pairs(&[(gt.clone(), grown)], &MetricConfig::default(), 1, vec![])
            .map_err(|e| e.to_string())?;
        ensure(r.counts.fp == 0 && r.counts.fn_ == 0, || {
            format!("seed {seed}: fixture has unmatched segments {:?}", r.counts)
        })?;
        let class_pqs: Vec<f64> = r.per_class.values().filter_map(|c| c.pq).collect();
        let mean = class_pqs.iter().sum::<f64>() / class_pqs.len() as f64;
        ensure(close(r.aggregate.mpq_plus, Some(mean)), || {
            format!(
                "seed {seed}: mPQ+ {:?} vs mean PQ {mean}",
                r.aggregate.mpq_plus
            )
        })?;
    }
    Ok("20 scenes: wPQ(a=1), bPQ(d=1), single-class fwPQ, mPQ+ at FP=FN=0 all match".into())
}

fn c7_monotone() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let spec = SceneSpec {
            seed: derive_seed(7, &[seed]),
            ..Default::default()
        };
        let gt = generate_scene(&spec).map_err(|e| e.to_string())?;
        let mut seq = Vec::new();
        let mut m = 0;
        loop {
            let pred = perturb(
                &gt,
                &Perturbation::new(PerturbationKind::Erode, m as f64, 0),
            )
            .unwrap();
            let r = evaluate_pairs(
                &[(gt.clone(), pred.clone())],
                &MetricConfig::default(),
                1,
                vec![],
            )
            .map_err(|e| e.to_string())?;
            let pq = r.aggregate.pq.unwrap_or(0.0);
            seq.push(pq);
            if pred.segments.is_empty() {
                ensure(pq == 0.0, || format!("seed {seed}: all erased but PQ {pq}"))?;
                break;
            }
            m += 1;
        }
        for k in 1..seq.len().min(4) {
            ensure(seq[k] <= seq[k - 1], || {
                format!(
                    "seed {seed}: PQ rose from {:.4} to {:.4} at magnitude {k} ({seq:.4?})",
                    seq[k - 1],
                    seq[k]
                )
            })?;
        }
        lines.push(seq.len() - 1);
    }
    Ok(format!(
        "10 seeds non-increasing over magnitudes 0..3; all erased at magnitudes {lines:?} with PQ 0"
    ))
}

fn c8_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ids: Vec<u32> = (0..100_000).map(|_| rng.random_range(0..=MAX_ID)).collect();
    ids[0] = 0;
    ids[1] = MAX_ID;
    ids[99_999] = 0;
    let map = IdMap::new(500, 200, ids).map_err(|e| e.to_string())?;
    let png = encode_panoptic_png(&map).map_err(|e| e.to_string())?;
    let back = decode_panoptic_png(&png).map_err(|e| e.to_string())?;
    ensure(back == map, || "decoded ids differ".into())?;
    let again = encode_panoptic_png(&back).map_err(|e| e.to_string())?;
    ensure(again == png, || "re-encoding changed the bytes".into())?;
    Ok("100000 ids (incl. 0 and 2^24-1) round-trip bit-exactly".into())
}

fn square(map_w: usize, squares: &[(usize, usize, u32, u32)]) -> LabelMap {
    let mut cls = vec![0u32; map_w * map_w];
    let mut inst = vec![0u32; map_w * map_w];
    for &(x0, y0, id, class) in squares {
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                cls[y * map_w + x] = class;
                inst[y * map_w + x] = id;
            }
        }
    }
    LabelMap::new(cls, inst, map_w, map_w).unwrap()
}

fn c9_ipq_null() -> Outcome {
    // image 1: gt A squares 1 and 2; pred A square 1 shifted right by one
    // pixel (IoU 12/20), pred B exactly on gt square 2
    let g1 = PanopticAnnotation::from_label_map("1", square(12, &[(1, 1, 1, 1), (7, 7, 2, 1)]));
    let p1 = PanopticAnnotation::from_label_map("1", square(12, &[(2, 1, 1, 1), (7, 7, 2, 2)]));
    // image 2: one gt A square, predicted exactly
    let g2 = PanopticAnnotation::from_label_map("2", square(12, &[(3, 3, 1, 1)]));
    let p2 = g2.clone();
    let r = evaluate_pairs(&[(g1, p1), (g2, p2)], &MetricConfig::default(), 1, vec![])
        .map_err(|e| e.to_string())?;
    // class A in image 1: tp 1 (IoU 0.6), fn 1 -> 0.6 / 1.5 = 0.4
    let img1 = &r.per_image[0];
    ensure(img1.ipq.is_some_and(|v| (v - 0.4).abs() < 1e-12), || {
        format!("image 1 score {:?}, hand value 0.4", img1.ipq)
    })?;
    ensure(img1.classes[&2].fp == 1 && img1.nulled_fp == 1, || {
        "class B FP not recorded as nulled".into()
    })?;
    ensure(
        r.aggregate.ipq.is_some_and(|v| (v - 0.7).abs() < 1e-12),
        || format!("iPQ {:?}, hand value (0.4 + 1) / 2 = 0.7", r.aggregate.ipq),
    )?;
    Ok("image-1 score 0.4 (class B null), iPQ 0.7".into())
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SceneSpec {
        seed: 10,
        width: 64,
        height: 64,
        num_classes: 3,
        instances: (1, 6),
        ..Default::default()
    };
    let gts = generate_dataset(&spec, 40).map_err(|e| e.to_string())?;
    let preds: Vec<_> = pairs_for(&gts, 1010).into_iter().map(|p| p.1).collect();
    let cats = (1..=3)
        .map(|id| pqsuite::panoptic_io::Category {
            id,
            name: format!("class{id}"),
            supercategory: String::new(),
            isthing: 1,
            color: None,
        })
        .collect::<Vec<_>>();
    let gt_json = write_dataset(dir.path(), "gt", &gts, cats.clone()).map_err(|e| e.to_string())?;
    let pred_json = write_dataset(dir.path(), "pred", &preds, cats).map_err(|e| e.to_string())?;
    let gt = Dataset::open(&gt_json, None).map_err(|e| e.to_string())?;
    let pred = Dataset::open(&pred_json, None).map_err(|e| e.to_string())?;
    let config = MetricConfig {
        all_aggregates: true,
        ..Default::default()
    };
    let mut outputs = Vec::new();
    for jobs in [1, 4, 16] {
        let r = evaluate_dataset(&gt, &pred, &config, jobs, ImageSetPolicy::Strict)
            .map_err(|e| e.to_string())?;
        outputs.push(r.to_json().map_err(|e| e.to_string())?);
    }
    ensure(outputs.iter().all(|o| *o == outputs[0]), || {
        "reports differ between worker counts".into()
    })?;
    Ok(format!(
        "40 images, 1/4/16 workers, {} identical bytes",
        outputs[0].len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "1 SQ x RQ decomposition of reference rows",
            c1_decomposition,
        ),
        (
            "2 macro-class average of reference per-class PQ",
            c2_class_average,
        ),
        ("3 identity suite", c3_identity),
        ("4 oracle equivalence", c4_oracle),
        ("5 matching uniqueness and conservation", c5_matching),
        ("6 limit identities", c6_limits),
        ("7 erosion monotonicity", c7_monotone),
        ("8 codec exactness", c8_codec),
        ("9 iPQ null rule", c9_ipq_null),
        ("10 determinism under parallelism", c10_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
