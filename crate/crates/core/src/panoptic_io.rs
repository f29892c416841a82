//! COCO panoptic codec (id-encoded PNG + JSON manifest), mask-pair ingestion,
//! deterministic segment colors and visualization rendering.
//!
//! Panoptic PNGs are 8-bit RGB with `id = R + 256·G + 65536·B`; id 0 is void.
//! The manifest uses the COCO panoptic field names verbatim.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::metrics::{self, MetricConfig};
use crate::report::{ImageError, MetricReport};
use crate::segmap::{LabelMap, PanopticAnnotation, SegmentRecord};
use crate::{Error, Result};

/// Largest id the RGB encoding can carry.
pub const MAX_ID: u32 = (1 << 24) - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

impl IdMap {
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for a {width}x{height} map",
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    /// Segment ids of a label map (void pixels are 0).
    pub fn from_label_map(map: &LabelMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            ids: map.instance_of().to_vec(),
        }
    }
}

fn codec_err(e: impl fmt::Display) -> Error {
    Error::Codec(e.to_string())
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        // pinned so identical maps always produce identical bytes
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Sub);
        let mut writer = enc.write_header().map_err(codec_err)?;
        writer.write_image_data(data).map_err(codec_err)?;
        writer.finish().map_err(codec_err)?;
    }
    Ok(out)
}

struct RawImage {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(codec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Codec("image too large".into()))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(codec_err)?;
    data.truncate(info.buffer_size());
    Ok(RawImage {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

pub fn decode_panoptic_png(bytes: &[u8]) -> Result<IdMap> {
    let img = decode_png(bytes)?;
    if img.color != png::ColorType::Rgb || img.depth != png::BitDepth::Eight {
        return Err(Error::Channel(format!(
            "expected 8-bit RGB, got {:?} at {:?}",
            img.color, img.depth
        )));
    }
    let ids = img
        .data
        .chunks_exact(3)
        .map(|p| p[0] as u32 + 256 * p[1] as u32 + 65536 * p[2] as u32)
        .collect();
    IdMap::new(img.width, img.height, ids)
}

pub fn encode_panoptic_png(map: &IdMap) -> Result<Vec<u8>> {
    let mut rgb = Vec::with_capacity(map.ids.len() * 3);
    for &id in &map.ids {
        if id > MAX_ID {
            return Err(Error::IdOverflow(id));
        }
        rgb.extend_from_slice(&[
            (id & 0xff) as u8,
            ((id >> 8) & 0xff) as u8,
            (id >> 16) as u8,
        ]);
    }
    encode_png(
        map.width,
        map.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &rgb,
    )
}

/// Single-channel PNG (8- or 16-bit grayscale, or 8-bit indexed read as raw
/// indices) as `(width, height, values)`.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let img = decode_png(bytes)?;
    let values = match (img.color, img.depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            img.data.iter().map(|&v| v as u32).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => img
            .data
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect(),
        (c, d) => {
            return Err(Error::Channel(format!(
                "expected single-channel 8/16-bit mask, got {c:?} at {d:?}"
            )))
        }
    };
    Ok((img.width, img.height, values))
}

/// 16-bit grayscale PNG.
pub fn encode_gray16_png(width: usize, height: usize, values: &[u16]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {width}x{height}",
            values.len()
        )));
    }
    let data: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

/// 8-bit grayscale PNG.
pub fn encode_gray8_png(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {width}x{height}",
            values.len()
        )));
    }
    encode_png(
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        values,
    )
}

/// COCO image id: integer or string in the JSON, compared as given.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(u64),
    Str(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Int(i) => write!(f, "{i}"),
            ImageId::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        match s.parse::<u64>() {
            Ok(i) if i.to_string() == s => ImageId::Int(i),
            _ => ImageId::Str(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: ImageId,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub area: u64,
    /// `[x, y, width, height]`
    #[serde(default)]
    pub bbox: [u64; 4],
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: ImageId,
    pub file_name: String,
    pub segments_info: Vec<SegmentInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
    #[serde(default = "default_isthing")]
    pub isthing: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
}

fn default_isthing() -> u8 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<serde_json::Value>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<Category>,
}

impl DatasetManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id.to_string() == id)
    }

    pub fn annotation(&self, id: &str) -> Option<&AnnotationEntry> {
        self.annotations
            .iter()
            .find(|a| a.image_id.to_string() == id)
    }

    /// Image ids in manifest order.
    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.to_string()).collect()
    }

    /// Structural problems: unknown categories, annotations of unlisted images.
    pub fn check(&self) -> Vec<String> {
        let cats: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let imgs: HashSet<String> = self.image_ids().into_iter().collect();
        let mut problems = Vec::new();
        for a in &self.annotations {
            if !imgs.contains(&a.image_id.to_string()) {
                problems.push(format!("annotation for unlisted image {}", a.image_id));
            }
            for s in &a.segments_info {
                if !cats.contains(&s.category_id) {
                    problems.push(format!(
                        "image {} segment {}: category {} not listed",
                        a.image_id, s.id, s.category_id
                    ));
                }
            }
        }
        problems
    }
}

/// A manifest plus the directory holding its PNGs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub png_dir: PathBuf,
}

impl Dataset {
    /// Opens `json_path`. PNGs live in `png_dir` if given, else in the
    /// directory named after the JSON file (`panoptic.json` -> `panoptic/`)
    /// when it exists, else next to the JSON file.
    pub fn open(json_path: &Path, png_dir: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(json_path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let manifest = DatasetManifest::from_json(&text)?;
        let png_dir = match png_dir {
            Some(d) => d.to_path_buf(),
            None => default_png_dir(json_path),
        };
        Ok(Self { manifest, png_dir })
    }

    pub fn load(&self, image_id: &str) -> Result<PanopticAnnotation> {
        load_annotation(&self.manifest, &self.png_dir, image_id)
    }
}

pub fn default_png_dir(json_path: &Path) -> PathBuf {
    let sibling = json_path.with_extension("");
    if sibling.is_dir() {
        sibling
    } else {
        json_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Joins the PNG ids of one image with its `segments_info`.
pub fn load_annotation(
    manifest: &DatasetManifest,
    png_dir: &Path,
    image_id: &str,
) -> Result<PanopticAnnotation> {
    let image = manifest
        .image(image_id)
        .ok_or_else(|| Error::MissingImage(image_id.to_string()))?;
    let Some(entry) = manifest.annotation(image_id) else {
        return Ok(PanopticAnnotation::from_label_map(
            image_id,
            LabelMap::void(image.width, image.height),
        ));
    };
    let path = png_dir.join(&entry.file_name);
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    let ids = decode_panoptic_png(&bytes)?;
    if (ids.width, ids.height) != (image.width, image.height) {
        return Err(Error::DimensionMismatch(format!(
            "image {image_id}: PNG is {}x{}, manifest says {}x{}",
            ids.width, ids.height, image.width, image.height
        )));
    }
    annotation_from_ids(manifest, image_id, &ids, &entry.segments_info)
}

/// Builds an annotation from decoded ids and a segment table.
pub fn annotation_from_ids(
    manifest: &DatasetManifest,
    image_id: &str,
    ids: &IdMap,
    segments_info: &[SegmentInfo],
) -> Result<PanopticAnnotation> {
    let cats: HashSet<u32> = manifest.categories.iter().map(|c| c.id).collect();
    let mut class_of_id = HashMap::new();
    for s in segments_info {
        if !cats.contains(&s.category_id) {
            return Err(Error::CategoryMissing(s.category_id));
        }
        class_of_id.insert(s.id, s.category_id);
    }
    let mut class_plane = Vec::with_capacity(ids.ids.len());
    for &id in &ids.ids {
        if id == 0 {
            class_plane.push(0);
            continue;
        }
        match class_of_id.get(&id) {
            Some(&c) => class_plane.push(c),
            None => {
                return Err(Error::UnknownSegmentId {
                    image_id: image_id.to_string(),
                    segment_id: id,
                })
            }
        }
    }
    let label_map = LabelMap::new(class_plane, ids.ids.clone(), ids.width, ids.height)?;
    let segments = segments_info
        .iter()
        .map(|s| SegmentRecord {
            segment_id: s.id,
            class_id: s.category_id,
            area: s.area,
            ignore: s.iscrowd != 0,
        })
        .collect();
    Ok(PanopticAnnotation {
        image_id: image_id.to_string(),
        label_map,
        segments,
    })
}

fn bboxes(map: &LabelMap) -> BTreeMap<u32, [u64; 4]> {
    let mut ext: BTreeMap<u32, (usize, usize, usize, usize)> = BTreeMap::new();
    let w = map.width();
    for (i, &s) in map.instance_of().iter().enumerate() {
        if s == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let e = ext.entry(s).or_insert((x, y, x, y));
        e.0 = e.0.min(x);
        e.1 = e.1.min(y);
        e.2 = e.2.max(x);
        e.3 = e.3.max(y);
    }
    ext.into_iter()
        .map(|(s, (x0, y0, x1, y1))| {
            (
                s,
                [
                    x0 as u64,
                    y0 as u64,
                    (x1 - x0 + 1) as u64,
                    (y1 - y0 + 1) as u64,
                ],
            )
        })
        .collect()
}

/// PNG bytes and manifest entry for one annotation. Segment ids are written
/// as-is, so they must be below 2^24.
pub fn save_annotation(
    ann: &PanopticAnnotation,
    file_name: &str,
) -> Result<(Vec<u8>, AnnotationEntry)> {
    let png = encode_panoptic_png(&IdMap::from_label_map(&ann.label_map))?;
    let boxes = bboxes(&ann.label_map);
    let segments_info = ann
        .segments
        .iter()
        .map(|s| SegmentInfo {
            id: s.segment_id,
            category_id: s.class_id,
            area: s.area,
            bbox: boxes.get(&s.segment_id).copied().unwrap_or_default(),
            iscrowd: s.ignore as u8,
        })
        .collect();
    Ok((
        png,
        AnnotationEntry {
            image_id: ImageId::from(ann.image_id.as_str()),
            file_name: file_name.to_string(),
            segments_info,
        },
    ))
}

/// Writes `<root>/<name>.json` plus one PNG per annotation under
/// `<root>/<name>/`.
pub fn write_dataset(
    root: &Path,
    name: &str,
    annotations: &[PanopticAnnotation],
    categories: Vec<Category>,
) -> Result<PathBuf> {
    let png_dir = root.join(name);
    std::fs::create_dir_all(&png_dir)?;
    let mut manifest = DatasetManifest {
        categories,
        ..Default::default()
    };
    for ann in annotations {
        let file_name = format!("{}.png", ann.image_id);
        let (png, entry) = save_annotation(ann, &file_name)?;
        std::fs::write(png_dir.join(&file_name), png)?;
        manifest.images.push(ImageEntry {
            id: entry.image_id.clone(),
            width: ann.width(),
            height: ann.height(),
            file_name: file_name.clone(),
        });
        manifest.annotations.push(entry);
    }
    let json_path = root.join(format!("{name}.json"));
    std::fs::write(&json_path, manifest.to_json()?)?;
    Ok(json_path)
}

/// Categories for mask-pair ingestion. `mask_value` is the pixel value in the
/// class PNG (defaults to the category id).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub categories: Vec<MappedCategory>,
    /// When set, void pixels become one segment of this category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_category: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedCategory {
    pub id: u32,
    pub name: String,
    #[serde(default = "default_isthing")]
    pub isthing: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_value: Option<u32>,
}

impl CategoryMapping {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn by_value(&self) -> HashMap<u32, &MappedCategory> {
        self.categories
            .iter()
            .map(|c| (c.mask_value.unwrap_or(c.id), c))
            .collect()
    }

    pub fn coco_categories(&self) -> Vec<Category> {
        self.categories
            .iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.clone(),
                supercategory: String::new(),
                isthing: c.isthing,
                color: None,
            })
            .collect()
    }
}

/// Converts a class plane and an instance plane into a panoptic annotation.
/// Thing classes need a nonzero instance value on every pixel; a stuff class
/// becomes one segment per image. Output segment ids are `1..=n` in
/// `(category id, instance value)` order.
pub fn ingest_planes(
    image_id: &str,
    width: usize,
    height: usize,
    class_values: &[u32],
    instance_values: &[u32],
    mapping: &CategoryMapping,
) -> Result<PanopticAnnotation> {
    if class_values.len() != width * height || instance_values.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "planes of {} and {} values for {width}x{height}",
            class_values.len(),
            instance_values.len()
        )));
    }
    let by_value = mapping.by_value();
    let mut keys: Vec<(u32, u32)> = Vec::with_capacity(class_values.len());
    for (i, (&cv, &iv)) in class_values.iter().zip(instance_values).enumerate() {
        let key = if cv == 0 {
            if iv != 0 {
                return Err(Error::InvariantViolation(format!(
                    "pixel ({}, {}) has instance {iv} but class 0",
                    i % width,
                    i / width
                )));
            }
            match mapping.background_category {
                Some(bg) => (bg, 0),
                None => (0, 0),
            }
        } else {
            let cat = by_value.get(&cv).ok_or(Error::UnmappedCategory(cv))?;
            if cat.isthing != 0 {
                if iv == 0 {
                    return Err(Error::InvariantViolation(format!(
                        "pixel ({}, {}) of thing class {} has no instance",
                        i % width,
                        i / width,
                        cat.id
                    )));
                }
                (cat.id, iv)
            } else {
                (cat.id, 0)
            }
        };
        keys.push(key);
    }
    let distinct: BTreeSet<(u32, u32)> = keys.iter().copied().filter(|k| k.0 != 0).collect();
    let new_id: HashMap<(u32, u32), u32> = distinct.into_iter().zip(1u32..).collect();
    let class_plane = keys.iter().map(|k| k.0).collect();
    let instance_plane = keys
        .iter()
        .map(|k| if k.0 == 0 { 0 } else { new_id[k] })
        .collect();
    let map = LabelMap::new(class_plane, instance_plane, width, height)?;
    Ok(PanopticAnnotation::from_label_map(image_id, map))
}

/// Mask-pair ingestion from PNG bytes.
pub fn ingest_mask_pair(
    image_id: &str,
    class_png: &[u8],
    instance_png: &[u8],
    mapping: &CategoryMapping,
) -> Result<PanopticAnnotation> {
    let (cw, ch, classes) = decode_gray_png(class_png)?;
    let (iw, ih, instances) = decode_gray_png(instance_png)?;
    if (cw, ch) != (iw, ih) {
        return Err(Error::DimensionMismatch(format!(
            "class mask {cw}x{ch}, instance mask {iw}x{ih}"
        )));
    }
    ingest_planes(image_id, cw, ch, &classes, &instances, mapping)
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const VOID_COLOR: [u8; 3] = [0, 0, 0];
const CONTOUR_COLOR: [u8; 3] = [255, 255, 255];

fn color_probe(class_id: u32, segment_id: u32, palette_seed: u64, probe: u64) -> [u8; 3] {
    let mut h = mix64(palette_seed ^ 0x9e37_79b9_7f4a_7c15);
    h = mix64(h ^ class_id as u64);
    h = mix64(h ^ ((segment_id as u64) << 32));
    h = mix64(h.wrapping_add(probe));
    [(h >> 16) as u8, (h >> 24) as u8, (h >> 32) as u8]
}

fn reserved(c: [u8; 3]) -> bool {
    c == VOID_COLOR || c == CONTOUR_COLOR
}

/// Hash color of a segment; never black (void) or white (contours).
pub fn generate_color(class_id: u32, segment_id: u32, palette_seed: u64) -> [u8; 3] {
    (0..)
        .map(|k| color_probe(class_id, segment_id, palette_seed, k))
        .find(|&c| !reserved(c))
        .expect("probe sequence is unbounded")
}

/// Colors for all segments of one image; collisions re-probe linearly so the
/// colors are pairwise distinct. Assignment runs in table order.
pub fn palette(segments: &[SegmentRecord], palette_seed: u64) -> BTreeMap<u32, [u8; 3]> {
    let mut used = HashSet::new();
    let mut out = BTreeMap::new();
    for s in segments {
        let color = (0..)
            .map(|k| color_probe(s.class_id, s.segment_id, palette_seed, k))
            .find(|c| !reserved(*c) && !used.contains(c))
            .expect("probe sequence is unbounded");
        used.insert(color);
        out.insert(s.segment_id, color);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(
            self.width,
            self.height,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &self.data,
        )
    }

    pub fn distinct_colors(&self) -> BTreeSet<[u8; 3]> {
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

/// Void is black, segments take their palette color; with `contours`,
/// segment pixels next to a different label are drawn white.
pub fn render_visualization(
    ann: &PanopticAnnotation,
    palette_seed: u64,
    contours: bool,
) -> RgbImage {
    let map = &ann.label_map;
    let (w, h) = (map.width(), map.height());
    let colors = palette(&map.segment_table(), palette_seed);
    let ids = map.instance_of();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let id = ids[y * w + x];
            let color = if id == 0 {
                VOID_COLOR
            } else if contours && on_contour(ids, w, h, x, y) {
                CONTOUR_COLOR
            } else {
                colors[&id]
            };
            data.extend_from_slice(&color);
        }
    }
    RgbImage {
        width: w,
        height: h,
        data,
    }
}

fn on_contour(ids: &[u32], w: usize, h: usize, x: usize, y: usize) -> bool {
    let id = ids[y * w + x];
    let neighbors = [
        (x > 0).then(|| ids[y * w + x - 1]),
        (x + 1 < w).then(|| ids[y * w + x + 1]),
        (y > 0).then(|| ids[(y - 1) * w + x]),
        (y + 1 < h).then(|| ids[(y + 1) * w + x]),
    ];
    neighbors.into_iter().flatten().any(|n| n != id)
}

/// Separator width between composite panels.
pub const COMPOSITE_GAP: usize = 8;

/// Panels side by side (gt first), separated by a gray gap.
pub fn composite(panels: &[&RgbImage]) -> Result<RgbImage> {
    let Some(first) = panels.first() else {
        return Err(Error::InvalidParameter("no panels to compose".into()));
    };
    if panels
        .iter()
        .any(|p| (p.width, p.height) != (first.width, first.height))
    {
        return Err(Error::DimensionMismatch(
            "composite panels differ in size".into(),
        ));
    }
    let h = first.height;
    let w = panels.len() * first.width + (panels.len() - 1) * COMPOSITE_GAP;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for (k, p) in panels.iter().enumerate() {
            if k > 0 {
                data.extend(std::iter::repeat_n(128u8, 3 * COMPOSITE_GAP));
            }
            data.extend_from_slice(&p.data[3 * y * p.width..3 * (y + 1) * p.width]);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// What to do when gt and pred image sets differ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSetPolicy {
    /// Missing predictions count as empty, extra predictions are ignored;
    /// both are reported as warnings.
    #[default]
    Lenient,
    Strict,
}

/// Recomputes table areas from the map and drops rows without pixels,
/// describing each repair.
pub fn normalize_annotation(ann: &mut PanopticAnnotation, side: &str) -> Vec<String> {
    let table: HashMap<u32, u64> = ann
        .label_map
        .segment_table()
        .into_iter()
        .map(|s| (s.segment_id, s.area))
        .collect();
    let mut notes = Vec::new();
    let image_id = ann.image_id.clone();
    ann.segments.retain(|s| {
        let keep = table.contains_key(&s.segment_id);
        if !keep {
            notes.push(format!(
                "{side} image {image_id}: segment {} has no pixels, dropped",
                s.segment_id
            ));
        }
        keep
    });
    for s in &mut ann.segments {
        let area = table[&s.segment_id];
        if s.area != area {
            notes.push(format!(
                "{side} image {image_id}: segment {} area {} corrected to {area}",
                s.segment_id, s.area
            ));
            s.area = area;
        }
    }
    notes
}

/// Pairs annotations by image id (sorted), applying the image-set policy.
pub fn align_annotations(
    gt: Vec<PanopticAnnotation>,
    pred: Vec<PanopticAnnotation>,
    policy: ImageSetPolicy,
    warnings: &mut Vec<String>,
) -> Result<Vec<(PanopticAnnotation, PanopticAnnotation)>> {
    let mut preds: BTreeMap<String, PanopticAnnotation> =
        pred.into_iter().map(|p| (p.image_id.clone(), p)).collect();
    let mut gts = gt;
    gts.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let missing: Vec<&str> = gts
        .iter()
        .filter(|g| !preds.contains_key(&g.image_id))
        .map(|g| g.image_id.as_str())
        .collect();
    let gt_ids: HashSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    let extra: Vec<String> = preds
        .keys()
        .filter(|k| !gt_ids.contains(k.as_str()))
        .cloned()
        .collect();
    if policy == ImageSetPolicy::Strict && (!missing.is_empty() || !extra.is_empty()) {
        return Err(Error::ImageSetMismatch(format!(
            "missing predictions for {missing:?}, predictions without gt {extra:?}"
        )));
    }
    for id in &missing {
        warnings.push(format!("no prediction for image {id}, scored as empty"));
    }
    for id in &extra {
        warnings.push(format!("prediction for unknown image {id} ignored"));
        preds.remove(id);
    }
    Ok(gts
        .into_iter()
        .map(|g| {
            let p = preds.remove(&g.image_id).unwrap_or_else(|| {
                PanopticAnnotation::from_label_map(
                    &g.image_id,
                    LabelMap::void(g.width(), g.height()),
                )
            });
            (g, p)
        })
        .collect())
}

/// Evaluates two in-memory annotation sets.
pub fn evaluate_annotations(
    gt: Vec<PanopticAnnotation>,
    pred: Vec<PanopticAnnotation>,
    config: &MetricConfig,
    jobs: usize,
    policy: ImageSetPolicy,
) -> Result<MetricReport> {
    let mut warnings = Vec::new();
    let pairs = align_annotations(gt, pred, policy, &mut warnings)?;
    metrics::evaluate_pairs(&pairs, config, jobs, warnings)
}

/// Loads both datasets and evaluates every gt image. Images that fail to
/// load are listed in the report's errors. Under the lenient policy, table
/// areas that disagree with the PNG are corrected with a warning; under the
/// strict policy they fail the image.
pub fn evaluate_dataset(
    gt: &Dataset,
    pred: &Dataset,
    config: &MetricConfig,
    jobs: usize,
    policy: ImageSetPolicy,
) -> Result<MetricReport> {
    config.check()?;
    let mut warnings = Vec::new();
    let mut gt_ids = gt.manifest.image_ids();
    gt_ids.sort();
    let pred_ids: HashSet<String> = pred.manifest.image_ids().into_iter().collect();
    let missing: Vec<&String> = gt_ids.iter().filter(|i| !pred_ids.contains(*i)).collect();
    let gt_set: HashSet<&String> = gt_ids.iter().collect();
    let mut extra: Vec<&String> = pred_ids.iter().filter(|i| !gt_set.contains(i)).collect();
    extra.sort();
    if policy == ImageSetPolicy::Strict && (!missing.is_empty() || !extra.is_empty()) {
        return Err(Error::ImageSetMismatch(format!(
            "missing predictions for {missing:?}, predictions without gt {extra:?}"
        )));
    }
    for id in &missing {
        warnings.push(format!("no prediction for image {id}, scored as empty"));
    }
    for id in &extra {
        warnings.push(format!("prediction for unknown image {id} ignored"));
    }

    let load_pair =
        |id: &String| -> Result<((PanopticAnnotation, PanopticAnnotation), Vec<String>)> {
            let mut g = gt.load(id)?;
            let mut p = if pred_ids.contains(id) {
                let p = pred.load(id)?;
                if (p.width(), p.height()) != (g.width(), g.height()) {
                    return Err(Error::DimensionMismatch(format!(
                        "gt is {}x{}, prediction is {}x{}",
                        g.width(),
                        g.height(),
                        p.width(),
                        p.height()
                    )));
                }
                p
            } else {
                PanopticAnnotation::from_label_map(id, LabelMap::void(g.width(), g.height()))
            };
            let mut notes = Vec::new();
            if policy == ImageSetPolicy::Lenient {
                notes.extend(normalize_annotation(&mut g, "gt"));
                notes.extend(normalize_annotation(&mut p, "pred"));
            }
            Ok(((g, p), notes))
        };
    let loaded: Vec<_> = metrics::with_pool(jobs, || {
        gt_ids.par_iter().map(load_pair).collect::<Vec<_>>()
    })?;

    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (id, out) in gt_ids.iter().zip(loaded) {
        match out {
            Ok((pair, notes)) => {
                warnings.extend(notes);
                pairs.push(pair);
            }
            Err(e) => errors.push(ImageError {
                image_id: id.clone(),
                message: e.to_string(),
            }),
        }
    }
    if pairs.is_empty() {
        if let Some(first) = errors.first() {
            return Err(Error::EmptyDataset(format!(
                "no image could be loaded (image {}: {})",
                first.image_id, first.message
            )));
        }
    }
    let mut report = metrics::evaluate_pairs(&pairs, config, jobs, warnings)?;
    let load_failures = errors.len() as u64;
    errors.append(&mut report.errors);
    errors.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    report.errors = errors;
    report.counts.failed_images += load_failures;
    Ok(report)
}
