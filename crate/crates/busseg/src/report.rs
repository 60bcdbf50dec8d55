//! Evaluation reports and prediction visualizations.
//!
//! JSON schema (`report.json`):
//!
//! ```text
//! {
//!   "format": "busseg-report 1",
//!   "mode": "<mode name>",
//!   "images": <number of evaluated target images>,
//!   "common_miou": <mean IoU over defined known classes, 0..1>,
//!   "private_iou": <IoU of the unknown class, 0..1>,
//!   "h_score": <harmonic mean of the two>,
//!   "per_class": [{"name": "<class>", "iou": <0..1 or null>}, ...],
//!   "unknown": {"intersection": <pixels>, "union": <pixels>},
//!   "counts": {"intersection": [...], "union": [...]}   // known ids, then unknown
//! }
//! ```
//!
//! `report.csv` is a header and one row: `mode,images,common_miou,private_iou,h_score`
//! followed by one `iou_<class>` column per known class (empty when undefined).

use busseg_core::metrics::MetricsReport;
use busseg_core::{ClassSpace, LabelMap, IGNORE_ID};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "busseg-report 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub mode: String,
    pub images: usize,
    pub common_miou: f64,
    pub private_iou: f64,
    pub h_score: f64,
    pub per_class: Vec<ClassIou>,
    pub unknown: PixelCounts,
    pub counts: CountTable,
}

impl Report {
    pub fn new(mode: &str, images: usize, names: &[String], m: &MetricsReport) -> Self {
        let u = m.per_class_iou.len();
        Self {
            format: FORMAT.into(),
            mode: mode.into(),
            images,
            common_miou: m.common_miou,
            private_iou: m.private_iou,
            h_score: m.h_score,
            per_class: names
                .iter()
                .zip(&m.per_class_iou)
                .map(|(name, &iou)| ClassIou {
                    name: name.clone(),
                    iou,
                })
                .collect(),
            unknown: PixelCounts {
                intersection: m.counts.intersection[u],
                union: m.counts.union[u],
            },
            counts: CountTable {
                intersection: m.counts.intersection.clone(),
                union: m.counts.union.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "mode".to_string(),
            "images".into(),
            "common_miou".into(),
            "private_iou".into(),
            "h_score".into(),
        ];
        header.extend(self.per_class.iter().map(|c| format!("iou_{}", c.name)));
        let mut row = vec![
            self.mode.clone(),
            self.images.to_string(),
            self.common_miou.to_string(),
            self.private_iou.to_string(),
            self.h_score.to_string(),
        ];
        row.extend(self.per_class.iter().map(|c| c.iou.map_or(String::new(), |v| v.to_string())));
        w.write_record(&header).expect("in-memory write");
        w.write_record(&row).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// The three headline numbers as printed by `eval`.
    pub fn summary_line(&self) -> String {
        format!("{:.4} {:.4} {:.4}", self.common_miou, self.private_iou, self.h_score)
    }
}

/// Colours for known classes, cycled when there are more classes than entries.
pub const PALETTE: [[u8; 3]; 10] = [
    [70, 110, 200],
    [230, 160, 30],
    [60, 170, 90],
    [200, 50, 60],
    [140, 90, 190],
    [120, 80, 40],
    [220, 110, 180],
    [110, 110, 110],
    [180, 190, 40],
    [40, 190, 200],
];
pub const UNKNOWN_RGB: [u8; 3] = [255, 255, 255];
pub const IGNORE_RGB: [u8; 3] = [0, 0, 0];

pub fn label_color(label: u8, cs: &ClassSpace) -> [u8; 3] {
    if label == IGNORE_ID {
        IGNORE_RGB
    } else if label == cs.unknown_id() {
        UNKNOWN_RGB
    } else {
        PALETTE[label as usize % PALETTE.len()]
    }
}

/// Renders a label map with the fixed palette as a P6 image.
pub fn visualize(label: &LabelMap, cs: &ClassSpace) -> Vec<u8> {
    let (h, w) = label.dims();
    let rgb: Vec<u8> = label.data().iter().flat_map(|&l| label_color(l, cs)).collect();
    crate::pnm::encode_rgb(w, h, &rgb)
}
