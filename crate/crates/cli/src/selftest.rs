//! Seed banks comparing the fast pipeline with the brute-force reference.

use anyhow::anyhow;
use pqsuite::matching::{apply_void_rule, contingency, match_segments};
use pqsuite::metrics::evaluate_pairs;
use pqsuite::oracle::{compare_reports, oracle_metrics};
use pqsuite::synth::{derive_seed, generate_dataset, perturb_all, random_perturbations, SceneSpec};
use pqsuite::{DenominatorConvention, LabelMap, MetricConfig, PanopticAnnotation};

use crate::{CmdResult, Failure};

type Pairs = Vec<(PanopticAnnotation, PanopticAnnotation)>;

/// A gt square and a pred covering exactly its top half: IoU is exactly 1/2,
/// so the pair must not match.
fn half_overlap(id: &str, seed: u64) -> (PanopticAnnotation, PanopticAnnotation) {
    let n = 16;
    let x0 = (derive_seed(seed, &[1]) % 10) as usize + 1;
    let y0 = (derive_seed(seed, &[2]) % 10) as usize + 1;
    let build = |rows: usize| {
        let mut cls = vec![0u32; n * n];
        let mut inst = vec![0u32; n * n];
        for y in y0..y0 + rows {
            for x in x0..x0 + 4 {
                cls[y * n + x] = 1;
                inst[y * n + x] = 1;
            }
        }
        PanopticAnnotation::from_label_map(id, LabelMap::new(cls, inst, n, n).unwrap())
    };
    (build(4), build(2))
}

fn bank_pairs(seed: u64) -> anyhow::Result<Pairs> {
    let spec = SceneSpec {
        seed,
        width: 32,
        height: 32,
        num_classes: 3,
        instances: (0, 3),
        radius: (1.5, 4.5),
        ..Default::default()
    };
    let mut pairs: Pairs = generate_dataset(&spec, 4)?
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let p = perturb_all(&g, &random_perturbations(derive_seed(seed, &[i as u64])))?;
            Ok((g, p))
        })
        .collect::<pqsuite::Result<_>>()?;
    pairs.push(half_overlap("half", seed));
    Ok(pairs)
}

fn identity(seed: u64, config: &MetricConfig) -> anyhow::Result<()> {
    let spec = SceneSpec {
        seed,
        instances: (1, 4),
        ..Default::default()
    };
    let pairs: Pairs = generate_dataset(&spec, 4)?
        .into_iter()
        .map(|g| (g.clone(), g))
        .collect();
    let r = evaluate_pairs(&pairs, config, 1, vec![])?;
    for (name, v) in r.aggregate.columns() {
        let ok = match name {
            "R2" => v.is_none_or(|x| x == 1.0),
            _ => v == Some(1.0),
        };
        if !ok {
            return Err(anyhow!("{name} = {v:?}"));
        }
    }
    Ok(())
}

fn oracle(pairs: &Pairs, config: &MetricConfig) -> anyhow::Result<()> {
    let fast = evaluate_pairs(pairs, config, 2, vec![])?;
    if let Some(e) = fast.errors.first() {
        return Err(anyhow!("image {}: {}", e.image_id, e.message));
    }
    let mut reference_config = config.clone();
    reference_config.inject_inclusive_match = false;
    let slow = oracle_metrics(pairs, &reference_config)?;
    let diffs = compare_reports(&fast, &slow, 1e-12);
    match diffs.first() {
        None => Ok(()),
        Some(d) => Err(anyhow!("{} difference(s), first: {d}", diffs.len())),
    }
}

fn conservation(pairs: &Pairs, config: &MetricConfig) -> anyhow::Result<()> {
    for (g, p) in pairs {
        let t = contingency(&g.label_map, &p.label_map)?;
        let r = match_segments(&t, &g.segments, &p.segments, &config.match_config())?;
        let r = apply_void_rule(r, &t, config.void_fraction_threshold);
        let tp: usize = r.classes.values().map(|m| m.tp_pairs.len()).sum();
        let fn_: usize = r.classes.values().map(|m| m.fn_gts.len()).sum();
        let fp: usize = r.classes.values().map(|m| m.fp_preds.len()).sum();
        let dropped: usize = r.classes.values().map(|m| m.discarded_preds.len()).sum();
        let gt_count = g.segments.iter().filter(|s| !s.ignore).count();
        if tp + fn_ != gt_count || tp + fp + dropped != p.segments.len() {
            return Err(anyhow!("image {}: counts not conserved", g.image_id));
        }
    }
    Ok(())
}

pub fn run(first_seed: u64, banks: u64, inject_fault: bool) -> CmdResult {
    let mut failures = 0;
    for bank in 0..banks {
        let seed = first_seed + bank;
        let base = MetricConfig {
            all_aggregates: true,
            inject_inclusive_match: inject_fault,
            ..Default::default()
        };
        let eq1 = MetricConfig {
            denominator: DenominatorConvention::Eq1Literal,
            ..base.clone()
        };
        let pairs = bank_pairs(seed).map_err(Failure::Evaluation)?;
        let checks: [(&str, anyhow::Result<()>); 4] = [
            ("identity", identity(seed, &base)),
            ("oracle-kirillov", oracle(&pairs, &base)),
            ("oracle-eq1", oracle(&pairs, &eq1)),
            ("conservation", conservation(&pairs, &base)),
        ];
        for (name, outcome) in checks {
            match outcome {
                Ok(()) => println!("bank {bank} (seed {seed}) {name}: pass"),
                Err(e) => {
                    failures += 1;
                    println!("bank {bank} (seed {seed}) {name}: FAIL {e:#}");
                }
            }
        }
    }
    println!("{banks} seed bank(s) exercised, {failures} failure(s)");
    if failures > 0 {
        Err(Failure::Evaluation(anyhow!("selftest failed")))
    } else {
        Ok(())
    }
}
