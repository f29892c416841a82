//! Contingency histogram, IoU, class-aware unique matching and void handling.
//!
//! Pixels whose instance id is 0 are void for matching purposes. Segments are
//! keyed by their segment id within their own annotation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::segmap::{LabelMap, SegmentRecord};
use crate::{Error, Result};

/// Joint histogram of (gt segment, pred segment) co-occurrence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub width: usize,
    pub height: usize,
    /// `(gt_id, pred_id) -> intersection pixels`
    pub pairs: BTreeMap<(u32, u32), u64>,
    pub gt_area: BTreeMap<u32, u64>,
    pub pred_area: BTreeMap<u32, u64>,
    /// Pred pixels lying on gt void.
    pub pred_void: BTreeMap<u32, u64>,
    /// Gt pixels lying on pred void.
    pub gt_void: BTreeMap<u32, u64>,
    /// Pixels void in both maps.
    pub void_void: u64,
}

impl ContingencyTable {
    /// Total pixels accounted for; always `width * height`.
    pub fn total(&self) -> u64 {
        self.pairs.values().sum::<u64>()
            + self.pred_void.values().sum::<u64>()
            + self.gt_void.values().sum::<u64>()
            + self.void_void
    }

    pub fn intersection(&self, gt: u32, pred: u32) -> u64 {
        self.pairs.get(&(gt, pred)).copied().unwrap_or(0)
    }
}

/// Single pass over both maps.
pub fn contingency(gt: &LabelMap, pred: &LabelMap) -> Result<ContingencyTable> {
    if gt.width() != pred.width() || gt.height() != pred.height() {
        return Err(Error::DimensionMismatch(format!(
            "gt {}x{} vs pred {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.instance_of().iter().zip(pred.instance_of()) {
        *joint.entry((g, p)).or_default() += 1;
    }
    let mut table = ContingencyTable {
        width: gt.width(),
        height: gt.height(),
        ..Default::default()
    };
    for ((g, p), n) in joint {
        if g != 0 {
            *table.gt_area.entry(g).or_default() += n;
        }
        if p != 0 {
            *table.pred_area.entry(p).or_default() += n;
        }
        match (g, p) {
            (0, 0) => table.void_void += n,
            (0, p) => {
                table.pred_void.insert(p, n);
            }
            (g, 0) => {
                table.gt_void.insert(g, n);
            }
            (g, p) => {
                table.pairs.insert((g, p), n);
            }
        }
    }
    Ok(table)
}

/// `I / (A_g + A_p - I)`.
pub fn iou(intersection: u64, gt_area: u64, pred_area: u64) -> Result<f64> {
    if gt_area == 0 || pred_area == 0 || intersection > gt_area.min(pred_area) {
        return Err(Error::InvalidCounts {
            intersection,
            gt_area,
            pred_area,
        });
    }
    let union = gt_area + pred_area - intersection;
    Ok(intersection as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// A pair matches iff IoU > threshold.
    pub threshold: f64,
    /// Remove the pred's void pixels from the union before computing IoU.
    #[serde(default)]
    pub void_in_union: bool,
    /// Fault injection for self-tests: match on IoU >= threshold.
    #[doc(hidden)]
    #[serde(skip)]
    pub inclusive: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            void_in_union: false,
            inclusive: false,
        }
    }
}

impl MatchConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidParameter(format!(
                "match threshold {} outside [0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    fn accepts(&self, iou: f64) -> bool {
        if self.inclusive {
            iou > 0.0 && iou >= self.threshold
        } else {
            iou > self.threshold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TpPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

/// Outcome for one class of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClassMatches {
    pub tp_pairs: Vec<TpPair>,
    pub fp_preds: Vec<u32>,
    pub fn_gts: Vec<u32>,
    pub discarded_preds: Vec<u32>,
}

impl ClassMatches {
    pub fn tp(&self) -> u64 {
        self.tp_pairs.len() as u64
    }

    pub fn fp(&self) -> u64 {
        self.fp_preds.len() as u64
    }

    pub fn fn_(&self) -> u64 {
        self.fn_gts.len() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub classes: BTreeMap<u32, ClassMatches>,
    /// Ignored (crowd) gt segments, `segment id -> class id`. They are not part
    /// of any gt population.
    pub crowd_gts: BTreeMap<u32, u32>,
}

impl MatchResult {
    pub fn class(&self, class_id: u32) -> Option<&ClassMatches> {
        self.classes.get(&class_id)
    }
}

/// Class-aware matching. Ties (possible only below 0.5) break by higher IoU,
/// then lower pred id, then lower gt id.
pub fn match_segments(
    table: &ContingencyTable,
    gt_segments: &[SegmentRecord],
    pred_segments: &[SegmentRecord],
    config: &MatchConfig,
) -> Result<MatchResult> {
    config.check()?;
    let mut result = MatchResult::default();
    let mut gt_class = BTreeMap::new();
    for g in gt_segments {
        if g.ignore {
            result.crowd_gts.insert(g.segment_id, g.class_id);
        } else {
            gt_class.insert(g.segment_id, g.class_id);
            result.classes.entry(g.class_id).or_default();
        }
    }
    let pred_class: BTreeMap<u32, u32> = pred_segments
        .iter()
        .map(|p| (p.segment_id, p.class_id))
        .collect();
    for &c in pred_class.values() {
        result.classes.entry(c).or_default();
    }

    let mut candidates = Vec::new();
    for (&(g, p), &inter) in &table.pairs {
        let (Some(&gc), Some(&pc)) = (gt_class.get(&g), pred_class.get(&p)) else {
            continue;
        };
        if gc != pc {
            continue;
        }
        let gt_area = table.gt_area.get(&g).copied().unwrap_or(0);
        let mut pred_area = table.pred_area.get(&p).copied().unwrap_or(0);
        if config.void_in_union {
            // equivalent to subtracting the pred's void pixels from the union
            pred_area -= table.pred_void.get(&p).copied().unwrap_or(0);
        }
        let value = iou(inter, gt_area, pred_area)?;
        if config.accepts(value) {
            candidates.push((
                gc,
                TpPair {
                    gt: g,
                    pred: p,
                    iou: value,
                },
            ));
        }
    }
    candidates.sort_by(|a, b| {
        b.1.iou
            .total_cmp(&a.1.iou)
            .then(a.1.pred.cmp(&b.1.pred))
            .then(a.1.gt.cmp(&b.1.gt))
    });

    let mut used_gt = BTreeSet::new();
    let mut used_pred = BTreeSet::new();
    for (class, pair) in candidates {
        if used_gt.contains(&pair.gt) || used_pred.contains(&pair.pred) {
            continue;
        }
        used_gt.insert(pair.gt);
        used_pred.insert(pair.pred);
        result.classes.get_mut(&class).unwrap().tp_pairs.push(pair);
    }
    for m in result.classes.values_mut() {
        m.tp_pairs.sort_by_key(|t| (t.gt, t.pred));
    }
    for (&g, &c) in &gt_class {
        if !used_gt.contains(&g) {
            result.classes.get_mut(&c).unwrap().fn_gts.push(g);
        }
    }
    for (&p, &c) in &pred_class {
        if !used_pred.contains(&p) {
            result.classes.get_mut(&c).unwrap().fp_preds.push(p);
        }
    }
    Ok(result)
}

/// Moves FP preds that mostly cover void (or a same-class crowd region) to
/// `discarded_preds`. TP pairs are never touched.
pub fn apply_void_rule(
    mut result: MatchResult,
    table: &ContingencyTable,
    void_fraction_threshold: f64,
) -> MatchResult {
    let crowd = result.crowd_gts.clone();
    for (&class, m) in result.classes.iter_mut() {
        let (keep, drop): (Vec<u32>, Vec<u32>) = m.fp_preds.iter().partition(|&&p| {
            let area = table.pred_area.get(&p).copied().unwrap_or(0);
            if area == 0 {
                return true;
            }
            let mut ignored = table.pred_void.get(&p).copied().unwrap_or(0);
            for (&g, &gc) in &crowd {
                if gc == class {
                    ignored += table.intersection(g, p);
                }
            }
            ignored as f64 / area as f64 <= void_fraction_threshold
        });
        m.fp_preds = keep;
        m.discarded_preds.extend(drop);
        m.discarded_preds.sort_unstable();
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmap::PanopticAnnotation;

    fn map_from_rows(rows: &[&str], class: u32) -> LabelMap {
        // digits are instance ids, '.' is void
        let h = rows.len();
        let w = rows[0].len();
        let mut cls = Vec::new();
        let mut inst = Vec::new();
        for r in rows {
            for ch in r.chars() {
                let id = ch.to_digit(10).unwrap_or(0);
                inst.push(id);
                cls.push(if id == 0 { 0 } else { class });
            }
        }
        LabelMap::new(cls, inst, w, h).unwrap()
    }

    fn run(gt: &LabelMap, pred: &LabelMap) -> (ContingencyTable, MatchResult) {
        let t = contingency(gt, pred).unwrap();
        let r = match_segments(
            &t,
            &gt.segment_table(),
            &pred.segment_table(),
            &MatchConfig::default(),
        )
        .unwrap();
        (t, r)
    }

    #[test]
    fn identical_maps_give_diagonal_table() {
        let m = map_from_rows(&["1122", "1122", "1122", "1122"], 1);
        let t = contingency(&m, &m).unwrap();
        assert_eq!(t.pairs, BTreeMap::from([((1, 1), 8), ((2, 2), 8)]));
        assert_eq!(t.total(), 16);
    }

    #[test]
    fn one_pred_covering_two_gts() {
        let gt = map_from_rows(&["1122", "1122", "1122", "1122"], 1);
        let pred = map_from_rows(&["3333", "3333", "3333", "3333"], 1);
        let t = contingency(&gt, &pred).unwrap();
        assert_eq!(t.pairs, BTreeMap::from([((1, 3), 8), ((2, 3), 8)]));
    }

    #[test]
    fn pred_inside_gt_void() {
        let gt = map_from_rows(&["....", "....", "1111"], 1);
        let pred = map_from_rows(&[".22.", ".22.", "...."], 1);
        let t = contingency(&gt, &pred).unwrap();
        assert!(t.pairs.is_empty());
        assert_eq!(t.pred_void[&2], 4);
        assert_eq!(t.gt_void[&1], 4);
        assert_eq!(t.total(), 12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = LabelMap::void(2, 2);
        let b = LabelMap::void(2, 3);
        assert!(matches!(
            contingency(&a, &b),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn iou_values() {
        // 4x4 square against itself shifted one column: 12 shared, union 20
        assert_eq!(iou(12, 16, 16).unwrap(), 0.6);
        assert_eq!(iou(5, 5, 5).unwrap(), 1.0);
        assert_eq!(iou(0, 5, 7).unwrap(), 0.0);
        assert!(matches!(iou(6, 5, 7), Err(Error::InvalidCounts { .. })));
        assert!(matches!(iou(0, 0, 7), Err(Error::InvalidCounts { .. })));
    }

    #[test]
    fn shifted_square_is_a_true_positive() {
        let gt = map_from_rows(&["11110", "11110", "11110", "11110"], 1);
        let pred = map_from_rows(&["01111", "01111", "01111", "01111"], 1);
        let (_, r) = run(&gt, &pred);
        let c = r.class(1).unwrap();
        assert_eq!(
            c.tp_pairs,
            vec![TpPair {
                gt: 1,
                pred: 1,
                iou: 0.6
            }]
        );
        assert!(c.fp_preds.is_empty() && c.fn_gts.is_empty());
    }

    #[test]
    fn iou_exactly_half_does_not_match() {
        // two 12-px segments sharing 8 px: union 16
        let gt = map_from_rows(&["1111", "1111", "1111", "...."], 1);
        let pred = map_from_rows(&["....", "2222", "2222", "2222"], 1);
        let (t, r) = run(&gt, &pred);
        assert_eq!(t.intersection(1, 2), 8);
        assert_eq!(iou(8, 12, 12).unwrap(), 0.5);
        let c = r.class(1).unwrap();
        assert!(c.tp_pairs.is_empty());
        assert_eq!((c.fp(), c.fn_()), (1, 1));

        let inclusive = MatchConfig {
            inclusive: true,
            ..Default::default()
        };
        let r = match_segments(&t, &gt.segment_table(), &pred.segment_table(), &inclusive).unwrap();
        assert_eq!(r.class(1).unwrap().tp(), 1);
    }

    #[test]
    fn classes_never_cross_match() {
        let gt = map_from_rows(&["11", "11"], 1);
        let pred = map_from_rows(&["11", "11"], 2);
        let (_, r) = run(&gt, &pred);
        assert_eq!(r.class(1).unwrap().fn_(), 1);
        assert_eq!(r.class(2).unwrap().fp(), 1);
        assert_eq!(r.class(1).unwrap().tp() + r.class(2).unwrap().tp(), 0);
    }

    fn void_fixture(on_void: usize) -> (ContingencyTable, MatchResult) {
        // 10-px pred: `on_void` pixels on gt void, the rest on a gt segment of
        // another class
        let mut gt_row = vec!['.'; on_void];
        gt_row.extend(std::iter::repeat_n('1', 20 - on_void));
        let gt_row: String = gt_row.into_iter().collect();
        let pred_row: String = "2222222222..........".into();
        let gt = map_from_rows(&[&gt_row], 1);
        let pred = map_from_rows(&[&pred_row], 3);
        let (t, r) = run(&gt, &pred);
        assert_eq!(r.class(3).unwrap().fp(), 1);
        (t.clone(), apply_void_rule(r, &t, 0.5))
    }

    #[test]
    fn void_rule_discards_mostly_void_fp() {
        let (_, r) = void_fixture(6);
        let c = r.class(3).unwrap();
        assert_eq!(c.fp(), 0);
        assert_eq!(c.discarded_preds, vec![2]);
    }

    #[test]
    fn void_rule_keeps_mostly_labeled_fp() {
        let (_, r) = void_fixture(4);
        assert_eq!(r.class(3).unwrap().fp(), 1);
    }

    #[test]
    fn void_rule_is_noop_without_void() {
        let gt = map_from_rows(&["1111", "2222"], 1);
        let pred = map_from_rows(&["3333", "3333"], 1);
        let (t, r) = run(&gt, &pred);
        assert_eq!(apply_void_rule(r.clone(), &t, 0.5), r);
    }

    #[test]
    fn crowd_region_absorbs_fp() {
        let gt = map_from_rows(&["1111", "1111"], 1);
        let pred = map_from_rows(&["22..", "22.."], 1);
        let mut ann = PanopticAnnotation::from_label_map("x", gt);
        ann.segments[0].ignore = true;
        let t = contingency(&ann.label_map, &pred).unwrap();
        let r = match_segments(
            &t,
            &ann.segments,
            &pred.segment_table(),
            &Default::default(),
        )
        .unwrap();
        let c = r.class(1).unwrap();
        assert_eq!((c.tp(), c.fp(), c.fn_()), (0, 1, 0));
        let r = apply_void_rule(r, &t, 0.5);
        assert_eq!(r.class(1).unwrap().discarded_preds, vec![2]);
    }

    #[test]
    fn self_match_is_perfect() {
        let m = map_from_rows(&["11.22", "11.22", "..3..", "44.55"], 1);
        let (_, r) = run(&m, &m);
        let c = r.class(1).unwrap();
        assert_eq!(c.tp(), 5);
        assert!(c.tp_pairs.iter().all(|t| t.iou == 1.0 && t.gt == t.pred));
    }

    #[test]
    fn low_threshold_ties_break_deterministically() {
        // gt 1 overlaps preds 2 and 3 equally (IoU 1/3 each)
        let gt = map_from_rows(&["1111"], 1);
        let pred = map_from_rows(&["3322"], 1);
        let t = contingency(&gt, &pred).unwrap();
        let cfg = MatchConfig {
            threshold: 0.2,
            ..Default::default()
        };
        let r = match_segments(&t, &gt.segment_table(), &pred.segment_table(), &cfg).unwrap();
        let c = r.class(1).unwrap();
        assert_eq!(c.tp_pairs[0].pred, 2);
        assert_eq!(c.fp_preds, vec![3]);
    }

    #[test]
    fn threshold_must_be_below_one() {
        let cfg = MatchConfig {
            threshold: 1.0,
            ..Default::default()
        };
        assert!(cfg.check().is_err());
    }
}
