use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array2, Array4, Array5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{
    evaluate, train_classifier, train_classifier_finetuned, ClassifierConfig, ClassifierLog, ClassifierNet, EvalReport,
    InputNorm, SequenceSet, StemSet,
};
use crate::error::{Error, Result};
use crate::formats::flowfile::FlowFile;
use crate::formats::snapshot::Snapshot;
use crate::jointtrain::{
    batched_features, discriminator_accuracy, image_accuracy, joint_train, train_image_only, Domain,
    FeatureExtractor, FrameSource, ImageSet, JointConfig, JointLog, JointModel,
};
use crate::nn::save_into;
use crate::synth::load_image_dir;

use super::convert::{load_manifest, ManifestRow};
use super::{derive_seed, BandLayout, PipelineConfig};

/// Converted flow epochs held in memory as stored (`f32`).
pub struct FlowBank {
    pub rows: Vec<ManifestRow>,
    /// Per epoch, `bands × pairs × 2 × h × w`.
    pub data: Vec<Array5<f32>>,
    pub classes: usize,
}

impl FlowBank {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let rows = load_manifest(&cfg.manifest_path())?;
        if rows.is_empty() {
            return Err(Error::invalid(format!(
                "{} lists no epochs; run convert on a recording with events first",
                cfg.manifest_path().display()
            )));
        }
        let dir = cfg.flow_dir();
        let mut data = Vec::with_capacity(rows.len());
        for r in &rows {
            let f = FlowFile::load(&dir.join(&r.file))?;
            data.push(f.data);
        }
        let dim = data[0].dim();
        if let Some(i) = data.iter().position(|d| d.dim() != dim) {
            return Err(Error::malformed("flow container", format!("{} differs in shape from the first epoch", rows[i].file)));
        }
        if dim.0 != cfg.bands.len() || dim.2 != 2 || dim.3 != cfg.grid || dim.4 != cfg.grid {
            return Err(Error::invalid(format!(
                "flow containers have shape {dim:?}, config expects {} bands on a {}×{} grid; rerun convert",
                cfg.bands.len(),
                cfg.grid,
                cfg.grid
            )));
        }
        let mut classes = rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
        if let Some(ev) = &cfg.events {
            classes = classes.max(ev.values().map(|k| k + 1).max().unwrap_or(0));
        }
        Ok(FlowBank { rows, data, classes })
    }

    pub fn bands(&self) -> usize {
        self.data[0].dim().0
    }

    pub fn pairs(&self) -> usize {
        self.data[0].dim().1
    }

    fn size(&self) -> (usize, usize) {
        let d = self.data[0].dim();
        (d.3, d.4)
    }

    fn frame_into(&self, epoch: usize, band_range: std::ops::Range<usize>, pair: usize, out: &mut ndarray::ArrayViewMut3<f64>) {
        let d = &self.data[epoch];
        for (k, b) in band_range.enumerate() {
            for c in 0..2 {
                out.slice_mut(s![2 * k + c, .., ..])
                    .zip_mut_with(&d.slice(s![b, pair, c, .., ..]), |o, &v| *o = f64::from(v));
            }
        }
    }

    /// Extractor input frames of one epoch. Stacked: `pairs × 2B × h × w`;
    /// separate: `B·pairs × 2 × h × w`, band-major.
    pub fn epoch_frames(&self, epoch: usize, layout: BandLayout) -> Array4<f64> {
        let (b, p) = (self.bands(), self.pairs());
        let (h, w) = self.size();
        match layout {
            BandLayout::Stacked => {
                let mut out = Array4::zeros((p, 2 * b, h, w));
                for pair in 0..p {
                    self.frame_into(epoch, 0..b, pair, &mut out.slice_mut(s![pair, .., .., ..]));
                }
                out
            }
            BandLayout::Separate => {
                let mut out = Array4::zeros((b * p, 2, h, w));
                for band in 0..b {
                    for pair in 0..p {
                        self.frame_into(epoch, band..band + 1, pair, &mut out.slice_mut(s![band * p + pair, .., .., ..]));
                    }
                }
                out
            }
        }
    }

    /// Per-step feature sequence of one epoch, `pairs × features`.
    pub fn epoch_features(&self, extractor: &FeatureExtractor, epoch: usize, layout: BandLayout) -> Result<Array2<f64>> {
        let feats = batched_features(extractor, Domain::Flow, &self.epoch_frames(epoch, layout))?;
        Ok(match layout {
            BandLayout::Stacked => feats,
            BandLayout::Separate => {
                let (b, p, f) = (self.bands(), self.pairs(), feats.ncols());
                let mut out = Array2::zeros((p, b * f));
                for band in 0..b {
                    out.slice_mut(s![.., band * f..(band + 1) * f])
                        .assign(&feats.slice(s![band * p..(band + 1) * p, ..]));
                }
                out
            }
        })
    }

    /// Distinct source epoch ids, ascending.
    pub fn sources(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().map(|r| r.source).collect();
        set.into_iter().collect()
    }

    /// Epoch indices of `sources`, at most `copies` per source (0 = all).
    pub fn epochs_of(&self, sources: &[usize], copies: usize) -> Vec<usize> {
        let wanted: BTreeSet<usize> = sources.iter().copied().collect();
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if !wanted.contains(&r.source) {
                continue;
            }
            let n = seen.entry(r.source).or_default();
            if copies == 0 || *n < copies {
                out.push(i);
            }
            *n += 1;
        }
        out
    }
}

/// Single flow frames of a subset of epochs, as sampled by joint training.
pub struct FramePool<'a> {
    pub bank: &'a FlowBank,
    pub epochs: Vec<usize>,
    pub layout: BandLayout,
}

impl FramePool<'_> {
    fn per_epoch(&self) -> usize {
        match self.layout {
            BandLayout::Stacked => self.bank.pairs(),
            BandLayout::Separate => self.bank.pairs() * self.bank.bands(),
        }
    }
}

impl FrameSource for FramePool<'_> {
    fn frame_count(&self) -> usize {
        self.epochs.len() * self.per_epoch()
    }

    fn channels(&self) -> usize {
        match self.layout {
            BandLayout::Stacked => 2 * self.bank.bands(),
            BandLayout::Separate => 2,
        }
    }

    fn frame_size(&self) -> (usize, usize) {
        self.bank.size()
    }

    fn gather(&self, idx: &[usize]) -> Array4<f64> {
        let (h, w) = self.bank.size();
        let (b, p, per) = (self.bank.bands(), self.bank.pairs(), self.per_epoch());
        let mut out = Array4::zeros((idx.len(), self.channels(), h, w));
        for (j, &i) in idx.iter().enumerate() {
            let epoch = self.epochs[i / per];
            let k = i % per;
            let mut view = out.slice_mut(s![j, .., .., ..]);
            match self.layout {
                BandLayout::Stacked => self.bank.frame_into(epoch, 0..b, k, &mut view),
                BandLayout::Separate => self.bank.frame_into(epoch, k / p..k / p + 1, k % p, &mut view),
            }
        }
        out
    }
}

/// Source-level train/test partition. `train` keeps its shuffled order so
/// that prefixes form nested subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_sources(sources: &[usize], test_fraction: f64, seed: u64) -> Result<Split> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 source epochs to split, found {n}")));
    }
    let mut order = sources.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((test_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    Ok(Split { train, test })
}

/// Leading share of the shuffled training sources, at least one.
pub fn train_subset(train: &[usize], fraction: f64) -> &[usize] {
    let k = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len());
    &train[..k]
}

pub struct Extracted {
    pub extractor: FeatureExtractor,
    pub model: Option<JointModel>,
    pub log: Option<JointLog>,
}

fn joint_config(cfg: &PipelineConfig, alpha: f64) -> JointConfig {
    JointConfig {
        alpha,
        lr: cfg.joint_lr,
        disc_lr: cfg.disc_lr,
        steps: cfg.joint_steps,
        batch: cfg.joint_batch,
        seed: derive_seed(cfg.seed, "joint"),
        disc_updates_extractor: cfg.disc_updates_extractor,
    }
}

fn untrained(cfg: &PipelineConfig) -> FeatureExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "joint"));
    FeatureExtractor::new(cfg.flow_channels(), &mut rng)
}

/// Loads the proxy images, or explains why they are required.
pub fn load_images(cfg: &PipelineConfig, warnings: &mut Vec<String>) -> Result<Option<ImageSet>> {
    match &cfg.images {
        Some(dir) => load_image_dir(dir, cfg.grid).map(Some).map_err(|e| e.in_stage("jointtrain")),
        None if cfg.alpha > 0.0 => Err(Error::invalid(format!(
            "alpha = {} needs proxy images: set `images` to a directory with labels.csv",
            cfg.alpha
        ))
        .in_stage("jointtrain")),
        None => {
            warnings.push("no proxy images configured; the feature extractor stays at its random initialisation".into());
            Ok(None)
        }
    }
}

/// Joint training on `pool`, or image-only training when `adversarial` is
/// false.
pub fn fit_extractor(cfg: &PipelineConfig, images: Option<&ImageSet>, pool: &FramePool, adversarial: bool) -> Result<Extracted> {
    let Some(images) = images else {
        return Ok(Extracted {
            extractor: untrained(cfg),
            model: None,
            log: None,
        });
    };
    let out = if adversarial {
        let (model, log) = joint_train(images, pool, &joint_config(cfg, cfg.alpha))?;
        Extracted {
            extractor: model.extractor.clone(),
            model: Some(model),
            log: Some(log),
        }
    } else {
        let (extractor, _) = train_image_only(images, pool.channels(), &joint_config(cfg, 0.0))?;
        Extracted {
            extractor,
            model: None,
            log: None,
        }
    };
    Ok(out)
}

pub struct Classified {
    pub net: ClassifierNet,
    pub extractor: FeatureExtractor,
    pub log: ClassifierLog,
    pub report: EvalReport,
}

fn sequences(bank: &FlowBank, ex: &FeatureExtractor, epochs: &[usize], layout: BandLayout) -> Result<SequenceSet> {
    let sequences = epochs
        .iter()
        .map(|&e| bank.epoch_features(ex, e, layout))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceSet {
        sequences,
        labels: epochs.iter().map(|&e| bank.rows[e].label).collect(),
        classes: bank.classes,
    })
}

/// Trains the sequence classifier on features of `train` and evaluates it
/// on `test`.
pub fn fit_classifier(
    cfg: &PipelineConfig,
    bank: &FlowBank,
    extractor: &FeatureExtractor,
    train: &[usize],
    test: &[usize],
) -> Result<Classified> {
    let layout = cfg.band_layout;
    let mut extractor = extractor.clone();
    let (h, w) = bank.size();
    let per_step = FeatureExtractor::feature_dim(h, w)
        * match layout {
            BandLayout::Stacked => 1,
            BandLayout::Separate => bank.bands(),
        };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classifier"));
    let mut net = ClassifierNet::new(per_step, cfg.hidden, cfg.dense, bank.classes, cfg.dropout, &mut rng);
    let ccfg = ClassifierConfig {
        lr: cfg.cls_lr,
        epochs: cfg.cls_epochs,
        batch: cfg.cls_batch,
        seed: derive_seed(cfg.seed, "classifier-batches"),
    };
    let train_set = sequences(bank, &extractor, train, layout)?;
    net.norm = InputNorm::fit(&train_set.sequences)?;
    let log = if cfg.finetune {
        let stems = train
            .iter()
            .map(|&e| extractor.stem(Domain::Flow, &bank.epoch_frames(e, layout)).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        let data = StemSet {
            stems,
            labels: train.iter().map(|&e| bank.rows[e].label).collect(),
            classes: bank.classes,
        };
        train_classifier_finetuned(&mut net, &mut extractor, &data, &ccfg)?
    } else {
        train_classifier(&mut net, &train_set, &ccfg)?
    };
    let report = evaluate(&net, &sequences(bank, &extractor, test, layout)?)?;
    Ok(Classified {
        net,
        extractor,
        log,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub report: EvalReport,
    pub train_epochs: usize,
    pub test_epochs: usize,
    pub image_accuracy: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn split_csv(split: &Split) -> String {
    let mut rows: Vec<(usize, &str)> = split.train.iter().map(|&s| (s, "train")).collect();
    rows.extend(split.test.iter().map(|&s| (s, "test")));
    rows.sort();
    let mut out = String::from("source,partition\n");
    for (s, p) in rows {
        out.push_str(&format!("{s},{p}\n"));
    }
    out
}

/// Evenly spaced subset of at most `cap` pool frames.
struct Thinned<'a> {
    pool: &'a FramePool<'a>,
    step: usize,
}

impl FrameSource for Thinned<'_> {
    fn frame_count(&self) -> usize {
        self.pool.frame_count().div_ceil(self.step)
    }

    fn channels(&self) -> usize {
        self.pool.channels()
    }

    fn frame_size(&self) -> (usize, usize) {
        self.pool.frame_size()
    }

    fn gather(&self, idx: &[usize]) -> Array4<f64> {
        let idx: Vec<usize> = idx.iter().map(|i| i * self.step).collect();
        self.pool.gather(&idx)
    }
}

/// Joint training, classifier training and evaluation. Writes the model
/// snapshot, both training logs, the evaluation report and the split.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let images = load_images(cfg, &mut warnings)?;
    let bank = FlowBank::load(cfg).map_err(|e| e.in_stage("train"))?;
    let split = split_sources(&bank.sources(), cfg.test_fraction, derive_seed(cfg.seed, "split"))?;
    let train = bank.epochs_of(&split.train, 0);
    let test = bank.epochs_of(&split.test, cfg.test_copies);

    let pool = FramePool {
        bank: &bank,
        epochs: train.clone(),
        layout: cfg.band_layout,
    };
    let ex = fit_extractor(cfg, images.as_ref(), &pool, true).map_err(|e| e.in_stage("jointtrain"))?;
    let cls = fit_classifier(cfg, &bank, &ex.extractor, &train, &test).map_err(|e| e.in_stage("classifier"))?;

    let (mut image_acc, mut disc_acc) = (None, None);
    if let (Some(model), Some(images)) = (&ex.model, &images) {
        image_acc = Some(image_accuracy(&model.extractor, &model.head, images)?);
        let test_pool = FramePool {
            bank: &bank,
            epochs: test.clone(),
            layout: cfg.band_layout,
        };
        let step = test_pool.frame_count().div_ceil(512).max(1);
        disc_acc = Some(discriminator_accuracy(model, &images.images, &Thinned { pool: &test_pool, step })?);
    }

    let dir = cfg.model_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut snap = Snapshot::default();
    save_into(&cls.extractor, &mut snap, "extractor");
    if let Some(model) = &ex.model {
        save_into(&model.head, &mut snap, "image_head");
        save_into(&model.disc, &mut snap, "discriminator");
    }
    save_into(&cls.net, &mut snap, "classifier");
    snap.push("classifier.norm.shift", &[cls.net.norm.shift.len()], cls.net.norm.shift.iter().copied());
    snap.push("classifier.norm.scale", &[cls.net.norm.scale.len()], cls.net.norm.scale.iter().copied());
    snap.save(&dir.join("model.eegm"))?;
    let joint_log = ex.log.as_ref().map_or_else(|| JointLog::default().to_csv(), JointLog::to_csv);
    write(&dir.join("joint_log.csv"), joint_log)?;
    write(&dir.join("classifier_log.csv"), cls.log.to_csv())?;
    write(&dir.join("eval_report.csv"), cls.report.to_csv())?;
    write(&dir.join("split.csv"), split_csv(&split))?;
    write(&dir.join("config.txt"), cfg.to_kv())?;

    Ok(TrainSummary {
        report: cls.report,
        train_epochs: train.len(),
        test_epochs: test.len(),
        image_accuracy: image_acc,
        disc_accuracy: disc_acc,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReduceRow {
    pub fraction: f64,
    pub joint: f64,
    pub no_joint: f64,
}

pub const REDUCE_HEADER: &str = "train_fraction,joint,no_joint";

pub fn reduce_to_csv(rows: &[ReduceRow]) -> String {
    let mut out = format!("{REDUCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.fraction * 100.0, r.joint, r.no_joint));
    }
    out
}

/// Accuracy on a fixed test set when training on shrinking nested subsets
/// of the training sources, with and without joint training. Writes
/// `reduce/table.csv`.
pub fn cmd_reduce_experiment(cfg: &PipelineConfig) -> Result<Vec<ReduceRow>> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let images = load_images(cfg, &mut warnings)?;
    let bank = FlowBank::load(cfg).map_err(|e| e.in_stage("reduce"))?;
    let split = split_sources(&bank.sources(), cfg.test_fraction, derive_seed(cfg.seed, "split"))?;
    let test = bank.epochs_of(&split.test, cfg.test_copies);

    let empty = FramePool {
        bank: &bank,
        epochs: Vec::new(),
        layout: cfg.band_layout,
    };
    let baseline = fit_extractor(cfg, images.as_ref(), &empty, false).map_err(|e| e.in_stage("jointtrain"))?;

    let mut rows = Vec::with_capacity(cfg.schedule.len());
    for &fraction in &cfg.schedule {
        let train = bank.epochs_of(train_subset(&split.train, fraction), 0);
        let pool = FramePool {
            bank: &bank,
            epochs: train.clone(),
            layout: cfg.band_layout,
        };
        let joint = fit_extractor(cfg, images.as_ref(), &pool, true).map_err(|e| e.in_stage("jointtrain"))?;
        let with = fit_classifier(cfg, &bank, &joint.extractor, &train, &test).map_err(|e| e.in_stage("classifier"))?;
        let without = fit_classifier(cfg, &bank, &baseline.extractor, &train, &test).map_err(|e| e.in_stage("classifier"))?;
        rows.push(ReduceRow {
            fraction,
            joint: with.report.accuracy,
            no_joint: without.report.accuracy,
        });
    }
    let dir = cfg.out_dir.join("reduce");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("table.csv"), reduce_to_csv(&rows))?;
    Ok(rows)
}
