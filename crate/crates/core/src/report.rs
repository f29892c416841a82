//! Metric report and its JSON / CSV renderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::{quality_ratio, CellStats, Metric, MetricConfig, Variant};
use crate::Result;

/// Dataset-level values; `None` means undefined or not requested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateValues {
    pub pq: Option<f64>,
    pub mpq_plus: Option<f64>,
    pub bpq: Option<f64>,
    pub ipq: Option<f64>,
    pub wpq: Option<f64>,
    pub fwpq: Option<f64>,
    pub r2: Option<f64>,
}

impl AggregateValues {
    /// `(name, value)` in table column order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("PQ", self.pq),
            ("mPQ+", self.mpq_plus),
            ("bPQ", self.bpq),
            ("iPQ", self.ipq),
            ("wPQ", self.wpq),
            ("fwPQ", self.fwpq),
            ("R2", self.r2),
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub discarded: u64,
    pub gt_pixels: u64,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub bpq: Option<f64>,
    pub wpq: Option<f64>,
}

impl ClassReport {
    pub fn from_cell(cell: &CellStats, config: &MetricConfig) -> Self {
        let conv = config.denominator;
        let base = quality_ratio(&cell.stats(Variant::Iou), conv);
        let variant = |m: Metric, v: Variant| {
            if config.wants(m) {
                quality_ratio(&cell.stats(v), conv).map(|q| q.pq)
            } else {
                None
            }
        };
        Self {
            tp: cell.tp,
            fp: cell.fp,
            fn_: cell.fn_,
            discarded: cell.discarded,
            gt_pixels: cell.gt_pixels,
            pq: base.map(|q| q.pq),
            sq: base.map(|q| q.sq),
            rq: base.map(|q| q.rq),
            bpq: variant(Metric::Bpq, Variant::Boundary),
            wpq: variant(Metric::Wpq, Variant::Weighted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: String,
    /// Mean over the image's defined class cells.
    pub pq: Option<f64>,
    /// iPQ score; null when the image has no gt segment.
    pub ipq: Option<f64>,
    /// FPs of classes absent from this image's gt (dropped by iPQ only).
    pub nulled_fp: u64,
    pub classes: BTreeMap<u32, ClassReport>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: u64,
    pub failed_images: u64,
    pub gt_segments: u64,
    pub pred_segments: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub discarded: u64,
    pub nulled_fp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageError {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub aggregate: AggregateValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregates_by_convention: Option<BTreeMap<String, AggregateValues>>,
    pub per_class: BTreeMap<u32, ClassReport>,
    pub per_image: Vec<ImageReport>,
    pub counts: Counts,
    pub observations: Vec<String>,
    pub warnings: Vec<String>,
    pub errors: Vec<ImageError>,
    /// Unix seconds; omitted for reproducible output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per `(scope, class, metric)`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "class", "metric", "value"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, v) in self.aggregate.columns() {
            w.write_record(["aggregate", "", name, &fmt(v)])?;
        }
        let class_rows = |w: &mut csv::Writer<Vec<u8>>, scope: &str, c: &u32, r: &ClassReport| {
            let class = c.to_string();
            for (name, v) in [
                ("PQ", r.pq),
                ("SQ", r.sq),
                ("RQ", r.rq),
                ("bPQ", r.bpq),
                ("wPQ", r.wpq),
                ("TP", Some(r.tp as f64)),
                ("FP", Some(r.fp as f64)),
                ("FN", Some(r.fn_ as f64)),
            ] {
                w.write_record([scope, &class, name, &fmt(v)])?;
            }
            Ok::<_, csv::Error>(())
        };
        for (c, r) in &self.per_class {
            class_rows(&mut w, "class", c, r)?;
        }
        for img in &self.per_image {
            let scope = format!("image:{}", img.image_id);
            w.write_record([scope.as_str(), "", "PQ", &fmt(img.pq)])?;
            w.write_record([scope.as_str(), "", "iPQ", &fmt(img.ipq)])?;
            for (c, r) in &img.classes {
                class_rows(&mut w, &scope, c, r)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Plain-text table in the column order PQ, mPQ+, bPQ, iPQ, wPQ, fwPQ, R²
    /// (values in percent).
    pub fn summary_table(&self) -> String {
        let cols = self.aggregate.columns();
        let mut out = String::new();
        for (name, _) in &cols {
            out.push_str(&format!("{name:>8}"));
        }
        out.push('\n');
        for (_, v) in &cols {
            match v {
                Some(x) => out.push_str(&format!("{:>8.2}", 100.0 * x)),
                None => out.push_str(&format!("{:>8}", "-")),
            }
        }
        out.push('\n');
        out
    }
}
