//! On-disk formats: images, scene bundles, checkpoints and JSON reports.

mod bundle;
mod checkpoint;
pub mod image;

pub use bundle::{
    image_path, load_bundle, mask_path, read_labels, save_bundle, write_json, LabelsJson,
    Manifest, SceneBundle, MANIFEST_SCHEMA_VERSION,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use image::{
    read_pgm, read_ppm, write_pgm, write_pgm16, write_ppm, write_ppm_from_flat, ImageGray,
    ImageRgb,
};

use serde::{Deserialize, Serialize};

/// Distance colormap for contact heatmaps: linear blue (distance 0) to red
/// (distance >= tau).
pub fn heatmap_color(distance: f64, tau: f64) -> [f64; 3] {
    let t = if distance.is_finite() { (distance / tau).clamp(0.0, 1.0) } else { 1.0 };
    [t, 0.0, 1.0 - t]
}

/// Per-frame contact report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContactFrameJson {
    pub schema_version: u32,
    pub frame: usize,
    pub tau: f64,
    pub tau_v: f64,
    pub units: String,
    pub hands: Vec<ContactHandJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContactHandJson {
    pub side: String,
    pub in_contact: Vec<u8>,
    /// Meters; null when no object surfel exists.
    pub distance: Vec<Option<f64>>,
    pub nearest_object_surfel: Vec<Option<usize>>,
}

/// Per-sequence accumulated contact report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContactSequenceJson {
    pub schema_version: u32,
    pub tau: f64,
    pub tau_v: f64,
    pub units: String,
    pub frames: usize,
    pub hands: Vec<AccumulatedHandJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccumulatedHandJson {
    pub side: String,
    pub ever_contact: Vec<u8>,
    pub min_distance: Vec<Option<f64>>,
    pub vertex_labels: Vec<u8>,
}

/// Output of `eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsJson {
    pub schema_version: u32,
    pub tau: f64,
    pub units: String,
    pub miou: f64,
    pub f1: f64,
    pub per_hand: std::collections::BTreeMap<String, HandMetricsJson>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub holdout_views: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandMetricsJson {
    pub iou: f64,
    pub f1: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_endpoints() {
        assert_eq!(heatmap_color(0.0, 0.01), [0.0, 0.0, 1.0]);
        assert_eq!(heatmap_color(0.01, 0.01), [1.0, 0.0, 0.0]);
        assert_eq!(heatmap_color(f64::INFINITY, 0.01), [1.0, 0.0, 0.0]);
        let mid = heatmap_color(0.005, 0.01);
        assert!((mid[0] - 0.5).abs() < 1e-12 && (mid[2] - 0.5).abs() < 1e-12);
    }
}
