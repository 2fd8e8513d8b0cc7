use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bandfilter::{standard_bands, Band};
use crate::error::{Error, Result};
use crate::formats::config::{load_kv, parse_kv, write_kv};
use crate::ingest::EventMap;
use crate::optflow::FarnebackParams;
use crate::topomap::{SegmentStat, FRAMES, GRID};

/// How the per-band flow fields reach the feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandLayout {
    /// All bands stacked as input channels of one frame.
    #[default]
    Stacked,
    /// Each band is a separate 2-channel stream; features are concatenated.
    Separate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub montage: PathBuf,
    pub recording: PathBuf,
    pub images: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Sampling rate hint; inferred from the time column when absent.
    pub rate: Option<f64>,
    /// Stimulus code to class id; `None` maps sorted nonzero codes to `0..K`.
    pub events: Option<EventMap>,
    pub frame_rate: f64,
    pub window: Option<usize>,
    pub jitter: Option<usize>,
    pub resample: usize,
    pub frames: usize,
    pub grid: usize,
    pub bands: Vec<Band>,
    pub segment_stat: SegmentStat,
    pub flow: FarnebackParams,
    pub band_layout: BandLayout,

    pub alpha: f64,
    pub joint_lr: f64,
    pub disc_lr: f64,
    pub joint_steps: usize,
    pub joint_batch: usize,
    pub disc_updates_extractor: bool,

    pub cls_lr: f64,
    pub cls_epochs: usize,
    pub cls_batch: usize,
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub finetune: bool,

    pub test_fraction: f64,
    /// Resampled copies of each test source that are evaluated; 0 = all.
    /// The default of 1 keeps the augmentation on the training side.
    pub test_copies: usize,
    pub schedule: Vec<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            montage: PathBuf::from("montage.csv"),
            recording: PathBuf::from("recording.csv"),
            images: None,
            out_dir: PathBuf::from("out"),
            rate: None,
            events: None,
            frame_rate: 13.0,
            window: None,
            jitter: None,
            resample: 50,
            frames: FRAMES,
            grid: GRID,
            bands: standard_bands().to_vec(),
            segment_stat: SegmentStat::Amplitude,
            flow: FarnebackParams::default(),
            band_layout: BandLayout::Stacked,
            alpha: 0.1,
            joint_lr: 0.05,
            disc_lr: 0.05,
            joint_steps: 300,
            joint_batch: 16,
            disc_updates_extractor: false,
            cls_lr: 0.05,
            cls_epochs: 30,
            cls_batch: 16,
            hidden: 128,
            dense: 64,
            dropout: 0.25,
            finetune: false,
            test_fraction: 0.1,
            test_copies: 1,
            schedule: vec![1.0, 0.5, 0.25],
            seed: 0,
        }
    }
}

const PATH_KEYS: [&str; 4] = ["montage", "recording", "images", "out"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("config key `{key}`: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("config key `{key}`: expected true/false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub fn parse_event_map(value: &str) -> Result<EventMap> {
    let mut map = EventMap::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (code, class) = item
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("event mapping {item:?} is not code:class")))?;
        let code: i64 = parse("events", code.trim())?;
        if code == 0 {
            return Err(Error::invalid("event code 0 means no event and cannot be mapped"));
        }
        if map.insert(code, parse("events", class.trim())?).is_some() {
            return Err(Error::invalid(format!("event code {code} mapped twice")));
        }
    }
    if map.is_empty() {
        return Err(Error::invalid("event map is empty"));
    }
    Ok(map)
}

fn format_event_map(map: &EventMap) -> String {
    map.iter().map(|(c, k)| format!("{c}:{k}")).collect::<Vec<_>>().join(",")
}

fn parse_bands(value: &str) -> Result<Vec<Band>> {
    let all = standard_bands();
    value
        .split(',')
        .map(|name| {
            let name = name.trim();
            all.iter()
                .find(|b| b.name.as_str() == name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown band {name:?}")))
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Reads a config file; relative paths in it resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let map = load_kv(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = PipelineConfig::default();
        for (k, v) in &map {
            cfg.set(k, v)?;
            if PATH_KEYS.contains(&k.as_str()) {
                cfg.rebase(k, base);
            }
        }
        Ok(cfg)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    fn rebase(&mut self, key: &str, base: &Path) {
        let slot = match key {
            "montage" => &mut self.montage,
            "recording" => &mut self.recording,
            "out" => &mut self.out_dir,
            _ => match self.images.as_mut() {
                Some(p) => p,
                None => return,
            },
        };
        if slot.is_relative() {
            *slot = base.join(&*slot);
        }
    }

    /// Applies one `key = value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "montage" => self.montage = v.into(),
            "recording" => self.recording = v.into(),
            "images" => self.images = (!v.is_empty()).then(|| v.into()),
            "out" => self.out_dir = v.into(),
            "rate" => self.rate = if v == "auto" { None } else { Some(parse(key, v)?) },
            "events" => self.events = if v == "auto" { None } else { Some(parse_event_map(v)?) },
            "frame_rate" => self.frame_rate = parse(key, v)?,
            "window" => self.window = if v == "auto" { None } else { Some(parse(key, v)?) },
            "jitter" => self.jitter = if v == "auto" { None } else { Some(parse(key, v)?) },
            "resample" => self.resample = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "grid" => self.grid = parse(key, v)?,
            "bands" => self.bands = parse_bands(v)?,
            "segment_stat" => {
                self.segment_stat = match v {
                    "amplitude" => SegmentStat::Amplitude,
                    "power" => SegmentStat::Power,
                    _ => return Err(Error::invalid(format!("segment_stat must be amplitude or power, got {v:?}"))),
                }
            }
            "flow_sigma" => self.flow.sigma = parse(key, v)?,
            "flow_radius" => self.flow.radius = parse(key, v)?,
            "flow_smooth_radius" => self.flow.smooth_radius = parse(key, v)?,
            "flow_iterations" => self.flow.iterations = parse(key, v)?,
            "flow_epsilon" => self.flow.epsilon = parse(key, v)?,
            "band_layout" => {
                self.band_layout = match v {
                    "stacked" => BandLayout::Stacked,
                    "separate" => BandLayout::Separate,
                    _ => return Err(Error::invalid(format!("band_layout must be stacked or separate, got {v:?}"))),
                }
            }
            "alpha" => self.alpha = parse(key, v)?,
            "joint_lr" => self.joint_lr = parse(key, v)?,
            "disc_lr" => self.disc_lr = parse(key, v)?,
            "joint_steps" => self.joint_steps = parse(key, v)?,
            "joint_batch" => self.joint_batch = parse(key, v)?,
            "disc_updates_extractor" => self.disc_updates_extractor = parse_bool(key, v)?,
            "cls_lr" => self.cls_lr = parse(key, v)?,
            "cls_epochs" => self.cls_epochs = parse(key, v)?,
            "cls_batch" => self.cls_batch = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "dense" => self.dense = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "finetune" => self.finetune = parse_bool(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "test_copies" => self.test_copies = parse(key, v)?,
            "schedule" => self.schedule = parse_list(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("montage", self.montage.display().to_string());
        put("recording", self.recording.display().to_string());
        put("images", self.images.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("out", self.out_dir.display().to_string());
        put("rate", self.rate.map_or("auto".into(), |r| r.to_string()));
        put("events", self.events.as_ref().map_or("auto".into(), format_event_map));
        put("frame_rate", self.frame_rate.to_string());
        put("window", self.window.map_or("auto".into(), |w| w.to_string()));
        put("jitter", self.jitter.map_or("auto".into(), |j| j.to_string()));
        put("resample", self.resample.to_string());
        put("frames", self.frames.to_string());
        put("grid", self.grid.to_string());
        put("bands", join(&self.bands.iter().map(|b| b.name.as_str()).collect::<Vec<_>>()));
        put(
            "segment_stat",
            match self.segment_stat {
                SegmentStat::Amplitude => "amplitude",
                SegmentStat::Power => "power",
            }
            .into(),
        );
        put("flow_sigma", self.flow.sigma.to_string());
        put("flow_radius", self.flow.radius.to_string());
        put("flow_smooth_radius", self.flow.smooth_radius.to_string());
        put("flow_iterations", self.flow.iterations.to_string());
        put("flow_epsilon", self.flow.epsilon.to_string());
        put(
            "band_layout",
            match self.band_layout {
                BandLayout::Stacked => "stacked",
                BandLayout::Separate => "separate",
            }
            .into(),
        );
        put("alpha", self.alpha.to_string());
        put("joint_lr", self.joint_lr.to_string());
        put("disc_lr", self.disc_lr.to_string());
        put("joint_steps", self.joint_steps.to_string());
        put("joint_batch", self.joint_batch.to_string());
        put("disc_updates_extractor", self.disc_updates_extractor.to_string());
        put("cls_lr", self.cls_lr.to_string());
        put("cls_epochs", self.cls_epochs.to_string());
        put("cls_batch", self.cls_batch.to_string());
        put("hidden", self.hidden.to_string());
        put("dense", self.dense.to_string());
        put("dropout", self.dropout.to_string());
        put("finetune", self.finetune.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("test_copies", self.test_copies.to_string());
        put("schedule", join(&self.schedule));
        put("seed", self.seed.to_string());
        write_kv(&m)
    }

    /// Epoch window length in samples for a recording at `rate`.
    pub fn window_for(&self, rate: f64) -> usize {
        self.window
            .unwrap_or_else(|| self.frames * (rate / self.frame_rate).ceil() as usize)
    }

    pub fn jitter_for(&self, rate: f64) -> usize {
        self.jitter.unwrap_or_else(|| self.window_for(rate) / 10)
    }

    /// Checks everything that does not depend on the input data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if let Some(r) = self.rate {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("rate must be positive, got {r}"));
            }
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if self.resample == 0 {
            return bad("resample must be at least 1".into());
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.grid < 4 || self.grid % 4 != 0 {
            return bad(format!("grid must be a positive multiple of 4, got {}", self.grid));
        }
        if self.bands.is_empty() {
            return bad("at least one band is required".into());
        }
        for (i, b) in self.bands.iter().enumerate() {
            if self.bands[..i].iter().any(|o| o.name == b.name) {
                return bad(format!("band {} listed twice", b.name.as_str()));
            }
        }
        self.flow.validate()?;
        if !(self.flow.epsilon >= 0.0) {
            return bad(format!("flow_epsilon must be non-negative, got {}", self.flow.epsilon));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        for (name, lr) in [("joint_lr", self.joint_lr), ("disc_lr", self.disc_lr), ("cls_lr", self.cls_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if self.joint_batch == 0 || self.cls_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.hidden == 0 || self.dense == 0 {
            return bad("hidden and dense sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("schedule fractions must lie in (0, 1]".into());
        }
        if self.finetune && self.band_layout == BandLayout::Separate {
            return bad("finetune is only supported with band_layout = stacked".into());
        }
        Ok(())
    }

    /// Channels of one flow frame as seen by the extractor.
    pub fn flow_channels(&self) -> usize {
        match self.band_layout {
            BandLayout::Stacked => 2 * self.bands.len(),
            BandLayout::Separate => 2,
        }
    }

    pub fn flow_dir(&self) -> PathBuf {
        self.out_dir.join("flows")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.csv")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }
}
