//! Seeded synthetic scenes (non-overlapping jittered disks) and controlled
//! perturbations of annotations.
//!
//! Every segment draws from its own ChaCha8 stream keyed by
//! `(seed, class, index)`, so adding a segment leaves the shapes of the others
//! untouched.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::segmap::{LabelMap, PanopticAnnotation};
use crate::{Error, Result};

const MAX_ATTEMPTS: usize = 500;
const MAX_FILL: f64 = 0.6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a parent seed and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_classes: u32,
    /// Inclusive range of instances per class.
    pub instances: (u32, u32),
    /// Disk radius range in pixels (at least 1).
    pub radius: (f64, f64),
    /// Minimum number of void pixels between two disks.
    pub min_gap: u32,
    /// Per-class radius multipliers (class `k` uses entry `k - 1`; missing
    /// entries mean 1). Skews class sizes.
    pub class_scale: Vec<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 32,
            height: 32,
            num_classes: 2,
            instances: (1, 3),
            radius: (2.0, 4.0),
            min_gap: 1,
            class_scale: Vec::new(),
        }
    }
}

impl SceneSpec {
    fn scale(&self, class: u32) -> f64 {
        self.class_scale
            .get(class as usize - 1)
            .copied()
            .unwrap_or(1.0)
    }

    fn check(&self) -> Result<()> {
        let (lo, hi) = self.radius;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InfeasibleSpec(format!(
                "radius range {lo}..{hi} must satisfy 1 <= lo <= hi"
            )));
        }
        if self.instances.0 > self.instances.1 {
            return Err(Error::InfeasibleSpec("instance range is empty".into()));
        }
        if self.class_scale.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InfeasibleSpec(
                "class scales must be positive".into(),
            ));
        }
        let mean_count = (self.instances.0 + self.instances.1) as f64 / 2.0;
        let mean_r = (lo + hi) / 2.0;
        let expected: f64 = (1..=self.num_classes)
            .map(|c| {
                let r = mean_r * self.scale(c);
                std::f64::consts::PI * r * r * mean_count
            })
            .sum();
        let frame = (self.width * self.height) as f64;
        if expected >= MAX_FILL * frame {
            return Err(Error::InfeasibleSpec(format!(
                "expected blob area {expected:.0} exceeds 60% of the {}x{} frame",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

fn disk_pixels(cx: i64, cy: i64, r: f64) -> Vec<(i64, i64)> {
    let ri = r.floor() as i64;
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dx * dx + dy * dy) as f64 <= r2 {
                out.push((cx + dx, cy + dy));
            }
        }
    }
    out
}

/// Places disks class by class. Fails with `InfeasibleSpec` when a disk finds
/// no free spot within the attempt budget.
pub fn generate_scene(spec: &SceneSpec) -> Result<PanopticAnnotation> {
    spec.check()?;
    let (w, h) = (spec.width, spec.height);
    let mut class_plane = vec![0u32; w * h];
    let mut inst_plane = vec![0u32; w * h];
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut next_id = 1u32;
    for class in 1..=spec.num_classes {
        let mut count_rng = stream(spec.seed, &[class as u64]);
        let count = count_rng.random_range(spec.instances.0..=spec.instances.1);
        for index in 0..count {
            let mut rng = stream(spec.seed, &[class as u64, index as u64 + 1]);
            let r = rng.random_range(spec.radius.0..=spec.radius.1) * spec.scale(class);
            let ri = r.floor() as i64;
            let (lo_x, hi_x) = (ri, w as i64 - 1 - ri);
            let (lo_y, hi_y) = (ri, h as i64 - 1 - ri);
            if r < 1.0 || lo_x > hi_x || lo_y > hi_y {
                return Err(Error::InfeasibleSpec(format!(
                    "disk of radius {r:.2} does not fit a {w}x{h} frame"
                )));
            }
            let mut spot = None;
            for _ in 0..MAX_ATTEMPTS {
                let cx = rng.random_range(lo_x..=hi_x);
                let cy = rng.random_range(lo_y..=hi_y);
                let clear = placed.iter().all(|&(px, py, pr)| {
                    let dist = ((cx as f64 - px).powi(2) + (cy as f64 - py).powi(2)).sqrt();
                    dist > r.floor() + pr.floor() + spec.min_gap as f64 + 1.0
                });
                if clear {
                    spot = Some((cx, cy));
                    break;
                }
            }
            let Some((cx, cy)) = spot else {
                return Err(Error::InfeasibleSpec(format!(
                    "no free spot for instance {index} of class {class} after {MAX_ATTEMPTS} attempts"
                )));
            };
            placed.push((cx as f64, cy as f64, r));
            for (x, y) in disk_pixels(cx, cy, r) {
                let i = y as usize * w + x as usize;
                class_plane[i] = class;
                inst_plane[i] = next_id;
            }
            next_id += 1;
        }
    }
    let map = LabelMap::new(class_plane, inst_plane, w, h)?;
    Ok(PanopticAnnotation::from_label_map(
        format!("scene-{:016x}", spec.seed),
        map,
    ))
}

/// `n` scenes with per-image seeds derived from `spec.seed`; image ids are
/// `img0000`, `img0001`, ...
pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<PanopticAnnotation>> {
    (0..n)
        .map(|i| {
            let s = SceneSpec {
                seed: derive_seed(spec.seed, &[0x5ce7e, i as u64]),
                ..spec.clone()
            };
            let mut ann = generate_scene(&s)?;
            ann.image_id = format!("img{i:04}");
            Ok(ann)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// `magnitude` steps of 4-neighbour erosion.
    Erode,
    /// `magnitude` steps of 4-neighbour growth into void.
    Dilate,
    /// Translate by `magnitude` pixels along a seed-chosen axis direction.
    Shift,
    /// Cut each segment in two with probability `magnitude`.
    Split,
    /// Fuse each segment with its nearest same-class neighbour with
    /// probability `magnitude`.
    Merge,
    /// Remove each segment with probability `magnitude`.
    Drop,
    /// Add `round(magnitude)` blobs on void pixels.
    Spurious,
    /// Change each segment's class with probability `magnitude`.
    RelabelClass,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 8] = [
        PerturbationKind::Erode,
        PerturbationKind::Dilate,
        PerturbationKind::Shift,
        PerturbationKind::Split,
        PerturbationKind::Merge,
        PerturbationKind::Drop,
        PerturbationKind::Spurious,
        PerturbationKind::RelabelClass,
    ];
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidParameter(format!("unknown perturbation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, magnitude: f64, seed: u64) -> Self {
        Self {
            kind,
            magnitude,
            seed,
        }
    }
}

struct Grid {
    w: usize,
    h: usize,
    inst: Vec<u32>,
    class_of: BTreeMap<u32, u32>,
}

impl Grid {
    fn from(ann: &PanopticAnnotation) -> Self {
        let map = &ann.label_map;
        let mut class_of = BTreeMap::new();
        for s in map.segment_table() {
            class_of.insert(s.segment_id, s.class_id);
        }
        Self {
            w: map.width(),
            h: map.height(),
            inst: map.instance_of().to_vec(),
            class_of,
        }
    }

    fn neighbours(&self, i: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        let (x, y) = (i % self.w, i / self.w);
        [
            (x > 0).then(|| i - 1),
            (x + 1 < self.w).then(|| i + 1),
            (y > 0).then(|| i - self.w),
            (y + 1 < self.h).then(|| i + self.w),
        ]
        .into_iter()
    }

    fn next_id(&self) -> u32 {
        self.class_of.keys().next_back().copied().unwrap_or(0) + 1
    }

    fn into_annotation(self, source: &PanopticAnnotation) -> Result<PanopticAnnotation> {
        let class_plane = self
            .inst
            .iter()
            .map(|&s| if s == 0 { 0 } else { self.class_of[&s] })
            .collect();
        let map = LabelMap::new(class_plane, self.inst, self.w, self.h)?;
        let mut out = PanopticAnnotation::from_label_map(source.image_id.clone(), map);
        for s in &mut out.segments {
            if let Some(orig) = source.segment(s.segment_id) {
                s.ignore = orig.ignore && orig.class_id == s.class_id;
            }
        }
        Ok(out)
    }
}

fn steps(magnitude: f64) -> usize {
    if magnitude > 0.0 {
        magnitude.round() as usize
    } else {
        0
    }
}

fn erode(g: &mut Grid, n: usize) {
    for _ in 0..n {
        let before = g.inst.clone();
        for i in 0..before.len() {
            let s = before[i];
            if s == 0 {
                continue;
            }
            let interior = g.neighbours(i).all(|n| n.is_some_and(|j| before[j] == s));
            if !interior {
                g.inst[i] = 0;
            }
        }
    }
}

fn dilate(g: &mut Grid, n: usize) {
    for _ in 0..n {
        let before = g.inst.clone();
        for i in 0..before.len() {
            if before[i] != 0 {
                continue;
            }
            // lowest neighbouring id wins
            if let Some(s) = g
                .neighbours(i)
                .flatten()
                .map(|j| before[j])
                .filter(|&s| s != 0)
                .min()
            {
                g.inst[i] = s;
            }
        }
    }
}

fn shift(g: &mut Grid, n: usize, seed: u64) {
    let dirs = [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)];
    let (dx, dy) = dirs[(derive_seed(seed, &[0x5417]) % 4) as usize];
    let before = std::mem::replace(&mut g.inst, vec![0; g.w * g.h]);
    for y in 0..g.h as i64 {
        for x in 0..g.w as i64 {
            let (sx, sy) = (x - dx * n as i64, y - dy * n as i64);
            if sx >= 0 && sy >= 0 && (sx as usize) < g.w && (sy as usize) < g.h {
                g.inst[y as usize * g.w + x as usize] = before[sy as usize * g.w + sx as usize];
            }
        }
    }
}

fn chance(seed: u64, kind: u64, segment: u32, p: f64) -> bool {
    p > 0.0 && stream(seed, &[kind, segment as u64]).random::<f64>() < p
}

fn split(g: &mut Grid, p: f64, seed: u64) {
    let ids: Vec<u32> = g.class_of.keys().copied().collect();
    for s in ids {
        if !chance(seed, 1, s, p) {
            continue;
        }
        let xs: Vec<usize> = (0..g.inst.len())
            .filter(|&i| g.inst[i] == s)
            .map(|i| i % g.w)
            .collect();
        let (lo, hi) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        if lo == hi {
            continue;
        }
        let cut = (lo + hi).div_ceil(2);
        let new = g.next_id();
        for i in 0..g.inst.len() {
            if g.inst[i] == s && i % g.w >= cut {
                g.inst[i] = new;
            }
        }
        g.class_of.insert(new, g.class_of[&s]);
    }
}

fn centroid(g: &Grid, s: u32) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &v) in g.inst.iter().enumerate() {
        if v == s {
            sx += (i % g.w) as f64;
            sy += (i / g.w) as f64;
            n += 1.0;
        }
    }
    (sx / n, sy / n)
}

fn merge(g: &mut Grid, p: f64, seed: u64) {
    let ids: Vec<u32> = g.class_of.keys().copied().collect();
    let mut gone = BTreeSet::new();
    for &s in &ids {
        if gone.contains(&s) || !chance(seed, 2, s, p) {
            continue;
        }
        let c = g.class_of[&s];
        let (x, y) = centroid(g, s);
        let partner = ids
            .iter()
            .filter(|&&o| o != s && !gone.contains(&o) && g.class_of[&o] == c)
            .map(|&o| {
                let (ox, oy) = centroid(g, o);
                ((ox - x).powi(2) + (oy - y).powi(2), o)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, o)) = partner {
            for v in &mut g.inst {
                if *v == o {
                    *v = s;
                }
            }
            gone.insert(o);
        }
    }
    for o in gone {
        g.class_of.remove(&o);
    }
}

fn drop_segments(g: &mut Grid, p: f64, seed: u64) {
    let ids: Vec<u32> = g.class_of.keys().copied().collect();
    for s in ids {
        if chance(seed, 3, s, p) {
            for v in &mut g.inst {
                if *v == s {
                    *v = 0;
                }
            }
            g.class_of.remove(&s);
        }
    }
}

fn spurious(g: &mut Grid, n: usize, seed: u64) {
    let max_class = g.class_of.values().copied().max().unwrap_or(1);
    for k in 0..n {
        let mut rng = stream(seed, &[4, k as u64]);
        let class = rng.random_range(1..=max_class);
        let r: f64 = rng.random_range(1.5..=3.0);
        let cx = rng.random_range(0..g.w) as i64;
        let cy = rng.random_range(0..g.h) as i64;
        let id = g.next_id();
        let mut any = false;
        for (x, y) in disk_pixels(cx, cy, r) {
            if x < 0 || y < 0 || x as usize >= g.w || y as usize >= g.h {
                continue;
            }
            let i = y as usize * g.w + x as usize;
            if g.inst[i] == 0 {
                g.inst[i] = id;
                any = true;
            }
        }
        if any {
            g.class_of.insert(id, class);
        }
    }
}

fn relabel(g: &mut Grid, p: f64, seed: u64) {
    let classes: Vec<u32> = g
        .class_of
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ids: Vec<u32> = g.class_of.keys().copied().collect();
    for s in ids {
        if !chance(seed, 5, s, p) {
            continue;
        }
        let c = g.class_of[&s];
        let others: Vec<u32> = classes.iter().copied().filter(|&o| o != c).collect();
        let new = if others.is_empty() {
            c + 1
        } else {
            others[stream(seed, &[6, s as u64]).random_range(0..others.len())]
        };
        g.class_of.insert(s, new);
    }
}

/// Applies one perturbation. Segment ids of surviving segments are kept; new
/// segments get ids above the current maximum. Magnitude 0 is the identity.
pub fn perturb(ann: &PanopticAnnotation, p: &Perturbation) -> Result<PanopticAnnotation> {
    let m = p.magnitude;
    if m == 0.0 {
        return Ok(ann.clone());
    }
    let mut g = Grid::from(ann);
    match p.kind {
        PerturbationKind::Erode => erode(&mut g, steps(m)),
        PerturbationKind::Dilate => dilate(&mut g, steps(m)),
        PerturbationKind::Shift => shift(&mut g, steps(m), p.seed),
        PerturbationKind::Split => split(&mut g, m, p.seed),
        PerturbationKind::Merge => merge(&mut g, m, p.seed),
        PerturbationKind::Drop => drop_segments(&mut g, m, p.seed),
        PerturbationKind::Spurious => spurious(&mut g, steps(m), p.seed),
        PerturbationKind::RelabelClass => relabel(&mut g, m, p.seed),
    }
    let present: BTreeSet<u32> = g.inst.iter().copied().filter(|&s| s != 0).collect();
    g.class_of.retain(|s, _| present.contains(s));
    g.into_annotation(ann)
}

/// Applies perturbations in order.
pub fn perturb_all(ann: &PanopticAnnotation, ps: &[Perturbation]) -> Result<PanopticAnnotation> {
    ps.iter().try_fold(ann.clone(), |a, p| perturb(&a, p))
}

/// A seeded mix of perturbations for oracle and property tests.
pub fn random_perturbations(seed: u64) -> Vec<Perturbation> {
    let mut rng = stream(seed, &[7]);
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|k| {
            let kind = PerturbationKind::ALL[rng.random_range(0..PerturbationKind::ALL.len())];
            let magnitude = match kind {
                PerturbationKind::Erode
                | PerturbationKind::Dilate
                | PerturbationKind::Shift
                | PerturbationKind::Spurious => rng.random_range(0..=3) as f64,
                _ => rng.random_range(0.0..0.6),
            };
            Perturbation::new(kind, magnitude, derive_seed(seed, &[8, k]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{contingency, iou, match_segments, MatchConfig};
    use proptest::prelude::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            width: 64,
            height: 64,
            num_classes: 2,
            instances: (3, 3),
            radius: (2.0, 4.0),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_scene(&spec(7)).unwrap();
        assert_eq!(a, generate_scene(&spec(7)).unwrap());
        assert_eq!(a.segments.len(), 6);
        assert!(a.validate().is_empty());
        assert!(a.segments.iter().all(|s| s.area >= 4));
        assert_ne!(a.label_map, generate_scene(&spec(8)).unwrap().label_map);
    }

    #[test]
    fn zero_instances_is_void() {
        let s = SceneSpec {
            instances: (0, 0),
            ..spec(1)
        };
        let a = generate_scene(&s).unwrap();
        assert!(a.segments.is_empty());
        assert_eq!(a.label_map.labeled_pixels(), 0);
    }

    #[test]
    fn infeasible_specs() {
        let crowded = SceneSpec {
            width: 16,
            height: 16,
            instances: (10, 10),
            ..spec(1)
        };
        assert!(matches!(
            generate_scene(&crowded),
            Err(Error::InfeasibleSpec(_))
        ));
        let tiny = SceneSpec {
            radius: (0.5, 1.0),
            ..spec(1)
        };
        assert!(matches!(
            generate_scene(&tiny),
            Err(Error::InfeasibleSpec(_))
        ));
    }

    #[test]
    fn class_scale_skews_sizes() {
        let s = SceneSpec {
            class_scale: vec![1.0, 0.5],
            radius: (4.0, 4.0),
            ..spec(3)
        };
        let a = generate_scene(&s).unwrap();
        let area = |c| a.segments.iter().find(|r| r.class_id == c).unwrap().area;
        assert!(area(1) > area(2));
    }

    #[test]
    fn magnitude_zero_is_identity() {
        let a = generate_scene(&spec(11)).unwrap();
        for kind in PerturbationKind::ALL {
            assert_eq!(perturb(&a, &Perturbation::new(kind, 0.0, 5)).unwrap(), a);
        }
    }

    fn square_scene() -> PanopticAnnotation {
        let mut cls = vec![0u32; 100];
        let mut inst = vec![0u32; 100];
        for y in 3..7 {
            for x in 3..7 {
                cls[y * 10 + x] = 1;
                inst[y * 10 + x] = 1;
            }
        }
        PanopticAnnotation::from_label_map("sq", LabelMap::new(cls, inst, 10, 10).unwrap())
    }

    #[test]
    fn shift_by_one_gives_iou_point_six() {
        let a = square_scene();
        for seed in 0..4 {
            let b = perturb(&a, &Perturbation::new(PerturbationKind::Shift, 1.0, seed)).unwrap();
            let t = contingency(&a.label_map, &b.label_map).unwrap();
            let r = match_segments(&t, &a.segments, &b.segments, &MatchConfig::default()).unwrap();
            let m = r.class(1).unwrap();
            assert_eq!(m.tp(), 1);
            assert_eq!(m.tp_pairs[0].iou, 0.6);
        }
    }

    #[test]
    fn large_erosion_erases_everything() {
        let a = generate_scene(&spec(2)).unwrap();
        let b = perturb(&a, &Perturbation::new(PerturbationKind::Erode, 10.0, 0)).unwrap();
        assert!(b.segments.is_empty());
    }

    #[test]
    fn kinds_change_the_scene() {
        let a = generate_scene(&spec(4)).unwrap();
        let n = a.segments.len();
        let p = |k, m| perturb(&a, &Perturbation::new(k, m, 9)).unwrap();
        assert_eq!(p(PerturbationKind::Drop, 1.0).segments.len(), 0);
        assert_eq!(p(PerturbationKind::Split, 1.0).segments.len(), 2 * n);
        assert_eq!(p(PerturbationKind::Merge, 1.0).segments.len(), 2);
        assert!(p(PerturbationKind::Spurious, 3.0).segments.len() > n);
        let relabeled = p(PerturbationKind::RelabelClass, 1.0);
        for x in &a.segments {
            assert_ne!(
                relabeled.segment(x.segment_id).unwrap().class_id,
                x.class_id
            );
        }
        let grown = p(PerturbationKind::Dilate, 1.0);
        assert!(grown.label_map.labeled_pixels() > a.label_map.labeled_pixels());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn perturbed_scenes_stay_valid(seed in any::<u64>(), pseed in any::<u64>()) {
            let s = SceneSpec { seed, ..SceneSpec::default() };
            let a = generate_scene(&s).unwrap();
            prop_assert!(a.validate().is_empty());
            let b = perturb_all(&a, &random_perturbations(pseed)).unwrap();
            prop_assert!(b.validate().is_empty());
        }

        #[test]
        fn erosion_never_raises_iou(seed in any::<u64>()) {
            let a = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
            let mut last: BTreeMap<u32, f64> =
                a.segments.iter().map(|s| (s.segment_id, 1.0)).collect();
            for m in 1..5 {
                let b = perturb(&a, &Perturbation::new(PerturbationKind::Erode, m as f64, 0)).unwrap();
                let t = contingency(&a.label_map, &b.label_map).unwrap();
                for s in &a.segments {
                    let inter = t.intersection(s.segment_id, s.segment_id);
                    let v = match t.pred_area.get(&s.segment_id) {
                        Some(&pa) => iou(inter, s.area, pa).unwrap(),
                        None => 0.0,
                    };
                    prop_assert!(v <= last[&s.segment_id]);
                    last.insert(s.segment_id, v);
                }
            }
        }
    }
}
