use std::path::PathBuf;

use ndarray::Array2;

use crate::classifier::EvalReport;
use crate::error::{Error, Result};
use crate::formats::flowfile::FlowFile;
use crate::formats::pnm::{GrayImage, RgbImage};
use crate::topomap::TopoMapper;

use super::convert::{load_manifest, prepare};
use super::PipelineConfig;

/// Pixel size of one confusion-matrix cell.
pub const HEATMAP_CELL: usize = 16;

/// Maps in-hull pixels of a band's frames to `0..=255` using the min/max
/// over all of them; pixels outside the hull stay black.
pub fn frames_to_gray(frames: &[Array2<f64>], mapper: &TopoMapper) -> Vec<GrayImage> {
    let size = mapper.size();
    let inside = |r: usize, c: usize| mapper.inside(r, c);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in frames {
        for r in 0..size {
            for c in 0..size {
                if inside(r, c) {
                    lo = lo.min(f[[r, c]]);
                    hi = hi.max(f[[r, c]]);
                }
            }
        }
    }
    let span = hi - lo;
    frames
        .iter()
        .map(|f| {
            let mut img = GrayImage::new(size, size);
            for r in 0..size {
                for c in 0..size {
                    if inside(r, c) && span > 0.0 {
                        img.set(c, r, (255.0 * (f[[r, c]] - lo) / span).round() as u8);
                    }
                }
            }
            img
        })
        .collect()
}

/// Black through red and yellow to white.
fn hot(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (255.0 * x.clamp(0.0, 1.0)).round() as u8;
    [ch(v), ch(v - 1.0), ch(v - 2.0)]
}

/// Row-normalised confusion matrix, one `HEATMAP_CELL`-sized square per
/// cell, rows true class and columns predicted class.
pub fn confusion_heatmap(report: &EvalReport) -> RgbImage {
    let k = report.classes();
    let mut img = RgbImage::new(k * HEATMAP_CELL, k * HEATMAP_CELL);
    for r in 0..k {
        let total: usize = report.confusion.row(r).sum();
        for c in 0..k {
            let v = if total == 0 { 0.0 } else { report.confusion[[r, c]] as f64 / total as f64 };
            let px = hot(v);
            for y in r * HEATMAP_CELL..(r + 1) * HEATMAP_CELL {
                for x in c * HEATMAP_CELL..(c + 1) * HEATMAP_CELL {
                    img.set(x, y, px);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualizeSummary {
    pub dir: PathBuf,
    pub gray_frames: usize,
    pub hsv_frames: usize,
    pub heatmap: bool,
}

/// Renders the EEG video frames, HSV flow images and (when an evaluation
/// report exists) the confusion heatmap of one converted epoch.
pub fn cmd_visualize(cfg: &PipelineConfig, epoch_id: usize) -> Result<VisualizeSummary> {
    let rows = load_manifest(&cfg.manifest_path())?;
    let row = rows
        .iter()
        .find(|r| r.epoch_id == epoch_id)
        .ok_or_else(|| Error::invalid(format!("epoch {epoch_id} is not in {}", cfg.manifest_path().display())))?;
    let prepared = prepare(cfg)?
        .ok_or_else(|| Error::invalid(format!("{} contains no samples", cfg.recording.display())))?;
    let matches = prepared
        .extraction
        .epochs
        .get(row.source)
        .is_some_and(|ep| ep.onset_sample + prepared.jitter == row.onset);
    if !matches {
        return Err(Error::invalid(format!("epoch {epoch_id} no longer matches the recording; rerun convert")));
    }
    let padded = prepared.source_bands(cfg, row.source)?;
    let video = prepared.render(cfg, &padded, row.offset)?;
    let flow = FlowFile::load(&cfg.flow_dir().join(&row.file))?.to_video()?;

    let dir = cfg.out_dir.join("viz").join(format!("epoch_{epoch_id:05}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut summary = VisualizeSummary {
        dir: dir.clone(),
        gray_frames: 0,
        hsv_frames: 0,
        heatmap: false,
    };
    for (b, band) in cfg.bands.iter().enumerate() {
        let name = band.name.as_str();
        let frames: Vec<Array2<f64>> = (0..video.frames()).map(|t| video.frame(b, t)).collect();
        for (t, img) in frames_to_gray(&frames, &prepared.mapper).iter().enumerate() {
            img.save(&dir.join(format!("{name}_frame_{t:02}.pgm")))?;
            summary.gray_frames += 1;
        }
        for (p, img) in flow.hsv[b].iter().enumerate() {
            img.save(&dir.join(format!("{name}_flow_{p:02}.ppm")))?;
            summary.hsv_frames += 1;
        }
    }
    let report_path = cfg.model_dir().join("eval_report.csv");
    if report_path.exists() {
        let text = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        confusion_heatmap(&EvalReport::parse_csv(&text)?).save(&dir.join("confusion.ppm"))?;
        summary.heatmap = true;
    }
    Ok(summary)
}
