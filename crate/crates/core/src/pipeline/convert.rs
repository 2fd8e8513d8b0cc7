use std::collections::BTreeSet;
use std::path::Path;

use crate::bandfilter::{bandpass_matrix, EpochBands};
use crate::error::{Error, Result};
use crate::formats::flowfile::FlowFile;
use crate::ingest::{
    extract_padded_epochs, jitter_offsets, load_montage, parse_recording, DroppedEvent, EventMap, Extraction, Montage,
    RawRecording,
};
use crate::optflow::video_flow_data;
use crate::topomap::{render_video, EegVideo, TopoMapper};

use super::{derive_seed, PipelineConfig};

/// Everything needed to cut and render epochs of one recording.
pub struct Prepared {
    pub montage: Montage,
    pub recording: RawRecording,
    pub mapper: TopoMapper,
    pub window: usize,
    pub jitter: usize,
    pub events: EventMap,
    pub extraction: Extraction,
}

/// One converted epoch. `onset` is the stimulus sample of the source event
/// and `offset` the jitter applied to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub epoch_id: usize,
    pub label: usize,
    pub source: usize,
    pub onset: usize,
    pub offset: i64,
    pub file: String,
}

pub const MANIFEST_HEADER: &str = "epoch_id,label,source,onset,offset,file";

pub fn manifest_to_csv(rows: &[ManifestRow]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch_id, r.label, r.source, r.onset, r.offset, r.file
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::malformed("manifest", format!("expected header `{MANIFEST_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::malformed("manifest", format!("line {}: {line:?}", i + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        let file = f[5];
        if file.is_empty() || file.contains(['/', '\\']) || file == ".." {
            return Err(bad());
        }
        rows.push(ManifestRow {
            epoch_id: f[0].parse().map_err(|_| bad())?,
            label: f[1].parse().map_err(|_| bad())?,
            source: f[2].parse().map_err(|_| bad())?,
            onset: f[3].parse().map_err(|_| bad())?,
            offset: f[4].parse().map_err(|_| bad())?,
            file: file.to_string(),
        });
    }
    Ok(rows)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvertSummary {
    pub sources: usize,
    pub containers: usize,
    pub dropped: Vec<DroppedEvent>,
    pub ignored: usize,
    pub warnings: Vec<String>,
}

fn has_samples(text: &str) -> bool {
    text.lines().skip(1).any(|l| !l.trim().is_empty())
}

fn auto_events(rec: &RawRecording) -> EventMap {
    let codes: BTreeSet<i64> = rec.events().into_iter().map(|(_, c)| c).collect();
    codes.into_iter().enumerate().map(|(k, c)| (c, k)).collect()
}

/// Loads inputs and cuts padded source epochs. Returns `None` for a
/// recording without samples.
pub fn prepare(cfg: &PipelineConfig) -> Result<Option<Prepared>> {
    cfg.validate()?;
    let montage = load_montage(&cfg.montage).map_err(|e| e.in_stage("ingest"))?;
    let text = std::fs::read_to_string(&cfg.recording).map_err(|e| Error::io(&cfg.recording, e).in_stage("ingest"))?;
    if !has_samples(&text) {
        // still check the header against the montage
        parse_recording(&text, &montage, Some(cfg.rate.unwrap_or(1.0))).map_err(|e| e.in_stage("ingest"))?;
        return Ok(None);
    }
    let recording = parse_recording(&text, &montage, cfg.rate).map_err(|e| e.in_stage("ingest"))?;
    for b in &cfg.bands {
        b.validate(recording.rate).map_err(|e| e.in_stage("bandfilter"))?;
    }
    let window = cfg.window_for(recording.rate);
    let jitter = cfg.jitter_for(recording.rate);
    if window < cfg.frames {
        return Err(Error::invalid(format!("window of {window} samples cannot form {} frames", cfg.frames)).in_stage("ingest"));
    }
    let events = cfg.events.clone().unwrap_or_else(|| auto_events(&recording));
    let extraction = extract_padded_epochs(&recording, window, jitter, &events).map_err(|e| e.in_stage("ingest"))?;
    let mapper = TopoMapper::new(&montage, cfg.grid).map_err(|e| e.in_stage("topomap"))?;
    Ok(Some(Prepared {
        montage,
        recording,
        mapper,
        window,
        jitter,
        events,
        extraction,
    }))
}

impl Prepared {
    /// Band-filtered copies of padded source epoch `source`.
    pub fn source_bands(&self, cfg: &PipelineConfig, source: usize) -> Result<EpochBands> {
        let ep = &self.extraction.epochs[source];
        let bands = cfg
            .bands
            .iter()
            .map(|b| bandpass_matrix(&ep.data, b, self.recording.rate))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("bandfilter"))?;
        Ok(EpochBands {
            bands,
            label: ep.label,
            onset_sample: ep.onset_sample,
        })
    }

    /// The EEG video of one jittered window of a filtered source epoch.
    pub fn render(&self, cfg: &PipelineConfig, padded: &EpochBands, offset: i64) -> Result<EegVideo> {
        let start = (self.jitter as i64 + offset) as usize;
        let cropped = padded.crop(start, self.window);
        render_video(&cropped, &self.mapper, cfg.frames, cfg.segment_stat).map_err(|e| e.in_stage("topomap"))
    }

    pub fn offsets(&self, cfg: &PipelineConfig) -> Vec<i64> {
        jitter_offsets(self.extraction.epochs.len(), cfg.resample, self.jitter, derive_seed(cfg.seed, "jitter"))
    }
}

pub fn container_name(epoch_id: usize) -> String {
    format!("epoch_{epoch_id:05}.eegf")
}

fn clear_stale(dir: &Path) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("epoch_") && name.ends_with(".eegf") {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Raw EEG to one flow container per resampled epoch, plus `manifest.csv`
/// and `drops.csv` in the output directory.
pub fn cmd_convert(cfg: &PipelineConfig) -> Result<ConvertSummary> {
    let prepared = prepare(cfg)?;
    let flow_dir = cfg.flow_dir();
    std::fs::create_dir_all(&flow_dir).map_err(|e| Error::io(&flow_dir, e))?;
    clear_stale(&flow_dir)?;

    let mut summary = ConvertSummary::default();
    let mut rows = Vec::new();
    let mut drops = String::from("sample,code\n");
    match &prepared {
        None => summary.warnings.push(format!(
            "{} contains no samples; nothing to convert",
            cfg.recording.display()
        )),
        Some(p) => {
            summary.sources = p.extraction.epochs.len();
            summary.dropped = p.extraction.dropped.clone();
            summary.ignored = p.extraction.ignored;
            for d in &p.extraction.dropped {
                drops.push_str(&format!("{},{}\n", d.sample, d.code));
            }
            if summary.sources == 0 {
                summary.warnings.push("no mapped stimulus events fit the recording".into());
            }
            if !summary.dropped.is_empty() {
                summary.warnings.push(format!(
                    "{} event(s) dropped because their window overruns the recording",
                    summary.dropped.len()
                ));
            }
            let offsets = p.offsets(cfg);
            for source in 0..summary.sources {
                let padded = p.source_bands(cfg, source)?;
                for copy in 0..cfg.resample {
                    let epoch_id = source * cfg.resample + copy;
                    let offset = offsets[epoch_id];
                    let video = p.render(cfg, &padded, offset)?;
                    let flow = video_flow_data(&video, &cfg.flow).map_err(|e| e.in_stage("optflow"))?;
                    let file = container_name(epoch_id);
                    FlowFile::from_flow_data(&flow).save(&flow_dir.join(&file))?;
                    rows.push(ManifestRow {
                        epoch_id,
                        label: padded.label,
                        source,
                        onset: padded.onset_sample + p.jitter,
                        offset,
                        file,
                    });
                }
            }
        }
    }
    summary.containers = rows.len();
    write(&cfg.manifest_path(), &manifest_to_csv(&rows))?;
    write(&cfg.out_dir.join("drops.csv"), &drops)?;
    Ok(summary)
}
