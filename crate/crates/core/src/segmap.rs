//! Panoptic data model: per-pixel label maps, segment tables and structural
//! validation.
//!
//! Class id 0 is void; it also houses background tissue unless an ingestion
//! option promotes background to a scored class. Instance id 0 means "no
//! instance". A segment is identified by its instance id alone: the same
//! instance id may not appear under two classes in one map, so segment ids are
//! unique within an image the way COCO panoptic requires.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One image's panoptic labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    class_of: Vec<u32>,
    instance_of: Vec<u32>,
}

impl LabelMap {
    /// Builds a label map from row-major class and instance planes.
    pub fn new(
        class_plane: Vec<u32>,
        instance_plane: Vec<u32>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let n = width * height;
        if class_plane.len() != n || instance_plane.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} pixels ({width}x{height}), got class plane {} and instance plane {}",
                class_plane.len(),
                instance_plane.len()
            )));
        }
        let mut owner: HashMap<u32, u32> = HashMap::new();
        for (i, (&c, &s)) in class_plane.iter().zip(&instance_plane).enumerate() {
            if s == 0 {
                continue;
            }
            if c == 0 {
                return Err(Error::InvariantViolation(format!(
                    "pixel ({}, {}) has instance {s} but void class",
                    i % width,
                    i / width
                )));
            }
            match owner.insert(s, c) {
                Some(prev) if prev != c => {
                    return Err(Error::InvariantViolation(format!(
                        "instance id {s} used by classes {prev} and {c}"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            width,
            height,
            class_of: class_plane,
            instance_of: instance_plane,
        })
    }

    /// An all-void map.
    pub fn void(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            class_of: vec![0; width * height],
            instance_of: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn class_of(&self) -> &[u32] {
        &self.class_of
    }

    pub fn instance_of(&self) -> &[u32] {
        &self.instance_of
    }

    pub fn class_at(&self, x: usize, y: usize) -> u32 {
        self.class_of[y * self.width + x]
    }

    pub fn instance_at(&self, x: usize, y: usize) -> u32 {
        self.instance_of[y * self.width + x]
    }

    /// Number of pixels that belong to some segment.
    pub fn labeled_pixels(&self) -> u64 {
        self.instance_of.iter().filter(|&&s| s != 0).count() as u64
    }

    /// One record per segment, ordered by `(class_id, segment_id)`.
    pub fn segment_table(&self) -> Vec<SegmentRecord> {
        let mut areas: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (&c, &s) in self.class_of.iter().zip(&self.instance_of) {
            if s != 0 {
                *areas.entry((c, s)).or_default() += 1;
            }
        }
        areas
            .into_iter()
            .map(|((class_id, segment_id), area)| SegmentRecord {
                segment_id,
                class_id,
                area,
                ignore: false,
            })
            .collect()
    }
}

/// Convenience wrapper over [`LabelMap::segment_table`].
pub fn segment_table(map: &LabelMap) -> Vec<SegmentRecord> {
    map.segment_table()
}

/// One segment row. `ignore` maps to COCO `iscrowd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: u32,
    pub class_id: u32,
    pub area: u64,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticAnnotation {
    pub image_id: String,
    pub label_map: LabelMap,
    pub segments: Vec<SegmentRecord>,
}

impl PanopticAnnotation {
    /// Annotation whose table is derived from the map, so it is valid by
    /// construction.
    pub fn from_label_map(image_id: impl Into<String>, label_map: LabelMap) -> Self {
        let segments = label_map.segment_table();
        Self {
            image_id: image_id.into(),
            label_map,
            segments,
        }
    }

    pub fn width(&self) -> usize {
        self.label_map.width()
    }

    pub fn height(&self) -> usize {
        self.label_map.height()
    }

    pub fn segment(&self, segment_id: u32) -> Option<&SegmentRecord> {
        self.segments.iter().find(|s| s.segment_id == segment_id)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Table row with no pixels in the map.
    PhantomRow {
        segment_id: u32,
    },
    /// Segment present in the map but absent from the table.
    MissingRow {
        segment_id: u32,
    },
    AreaMismatch {
        segment_id: u32,
        table_area: u64,
        map_area: u64,
    },
    ClassMismatch {
        segment_id: u32,
        table_class: u32,
        map_class: u32,
    },
    DuplicateId {
        segment_id: u32,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::PhantomRow { segment_id } => {
                write!(f, "segment {segment_id} listed but absent from the map")
            }
            Violation::MissingRow { segment_id } => {
                write!(f, "segment {segment_id} present in the map but not listed")
            }
            Violation::AreaMismatch {
                segment_id,
                table_area,
                map_area,
            } => write!(
                f,
                "segment {segment_id} area {table_area} in table, {map_area} in map"
            ),
            Violation::ClassMismatch {
                segment_id,
                table_class,
                map_class,
            } => write!(
                f,
                "segment {segment_id} class {table_class} in table, {map_class} in map"
            ),
            Violation::DuplicateId { segment_id } => {
                write!(f, "segment id {segment_id} listed more than once")
            }
        }
    }
}

/// Checks the segment table against the label map. Never fails; an empty
/// report means the annotation is consistent.
pub fn validate(ann: &PanopticAnnotation) -> Vec<Violation> {
    let actual: BTreeMap<u32, SegmentRecord> = ann
        .label_map
        .segment_table()
        .into_iter()
        .map(|r| (r.segment_id, r))
        .collect();
    let mut violations = Vec::new();
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for row in &ann.segments {
        let count = seen.entry(row.segment_id).or_default();
        *count += 1;
        if *count == 2 {
            violations.push(Violation::DuplicateId {
                segment_id: row.segment_id,
            });
        }
        if *count > 1 {
            continue;
        }
        match actual.get(&row.segment_id) {
            None => violations.push(Violation::PhantomRow {
                segment_id: row.segment_id,
            }),
            Some(found) => {
                if found.class_id != row.class_id {
                    violations.push(Violation::ClassMismatch {
                        segment_id: row.segment_id,
                        table_class: row.class_id,
                        map_class: found.class_id,
                    });
                }
                if found.area != row.area {
                    violations.push(Violation::AreaMismatch {
                        segment_id: row.segment_id,
                        table_area: row.area,
                        map_area: found.area,
                    });
                }
            }
        }
    }
    for id in actual.keys() {
        if !seen.contains_key(id) {
            violations.push(Violation::MissingRow { segment_id: *id });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 4x4 map, left half instance 1, right half instance 2, both class 1.
    fn two_halves() -> LabelMap {
        let class = vec![1; 16];
        let inst = (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect();
        LabelMap::new(class, inst, 4, 4).unwrap()
    }

    #[test]
    fn all_void_map_has_no_segments() {
        let map = LabelMap::new(vec![0; 16], vec![0; 16], 4, 4).unwrap();
        assert!(map.segment_table().is_empty());
    }

    #[test]
    fn single_segment_identity() {
        let map = LabelMap::new(vec![1; 4], vec![7; 4], 2, 2).unwrap();
        assert_eq!(
            map.segment_table(),
            vec![SegmentRecord {
                segment_id: 7,
                class_id: 1,
                area: 4,
                ignore: false
            }]
        );
    }

    #[test]
    fn instance_on_void_class_is_rejected() {
        let err = LabelMap::new(vec![0; 4], vec![0, 3, 0, 0], 2, 2).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn plane_size_mismatch() {
        let err = LabelMap::new(vec![0; 4], vec![0; 3], 2, 2).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn shared_instance_id_across_classes_is_rejected() {
        let err = LabelMap::new(vec![1, 2], vec![5, 5], 2, 1).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn two_eight_pixel_segments() {
        let table = two_halves().segment_table();
        assert_eq!(table.iter().map(|r| r.area).collect::<Vec<_>>(), [8, 8]);
        assert_eq!(table[0].segment_id, 1);
    }

    #[test]
    fn full_frame_segment() {
        let map = LabelMap::new(vec![3; 12], vec![1; 12], 4, 3).unwrap();
        assert_eq!(map.segment_table()[0].area, 12);
    }

    #[test]
    fn consistent_annotation_validates() {
        let ann = PanopticAnnotation::from_label_map("a", two_halves());
        assert!(validate(&ann).is_empty());
    }

    #[test]
    fn table_row_area_nine_vs_map_eight() {
        // table built from a map where one pixel of segment 2 was flipped to 1
        let mut inst = two_halves().instance_of().to_vec();
        inst[2] = 1;
        let flipped = LabelMap::new(vec![1; 16], inst, 4, 4).unwrap();
        let mut ann = PanopticAnnotation::from_label_map("a", two_halves());
        ann.segments[0].area = flipped.segment_table()[0].area;
        assert_eq!(
            validate(&ann),
            vec![Violation::AreaMismatch {
                segment_id: 1,
                table_area: 9,
                map_area: 8
            }]
        );
    }

    #[test]
    fn duplicate_row_reported_once() {
        let mut ann = PanopticAnnotation::from_label_map("a", two_halves());
        ann.segments.push(ann.segments[0]);
        assert_eq!(
            validate(&ann),
            vec![Violation::DuplicateId { segment_id: 1 }]
        );
    }

    #[test]
    fn phantom_and_missing_rows() {
        let mut ann = PanopticAnnotation::from_label_map("a", two_halves());
        ann.segments[1].segment_id = 9;
        let v = validate(&ann);
        assert!(v.contains(&Violation::PhantomRow { segment_id: 9 }));
        assert!(v.contains(&Violation::MissingRow { segment_id: 2 }));
    }

    fn arb_map() -> impl Strategy<Value = LabelMap> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0u32..4, w * h).prop_map(move |ids| {
                // instance id k always belongs to class (k % 2) + 1
                let class = ids
                    .iter()
                    .map(|&s| if s == 0 { 0 } else { s % 2 + 1 })
                    .collect();
                LabelMap::new(class, ids, w, h).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn table_areas_sum_to_labeled_pixels(map in arb_map()) {
            let total: u64 = map.segment_table().iter().map(|r| r.area).sum();
            prop_assert_eq!(total, map.labeled_pixels());
        }

        #[test]
        fn derived_annotation_is_valid_and_table_is_stable(map in arb_map()) {
            let ann = PanopticAnnotation::from_label_map("p", map.clone());
            prop_assert!(validate(&ann).is_empty());
            prop_assert_eq!(map.segment_table(), ann.segments);
        }
    }
}
