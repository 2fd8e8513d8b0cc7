//! Joint adversarial training of a shared convolutional feature extractor.
//!
//! Two objectives alternate. The extractor step minimises image-task
//! cross-entropy plus `alpha` times a domain-confusion term, the
//! cross-entropy between the frozen discriminator's output and the uniform
//! domain distribution, over features of both domains. The discriminator
//! step minimises ordinary supervised domain cross-entropy on frozen
//! features.

use ndarray::{concatenate, Array2, Array4, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    all_finite, maxpool2, maxpool2_backward, nested, nested_mut, relu, relu_backward, sgd, softmax,
    softmax_cross_entropy, softmax_uniform_cross_entropy, Conv2d, ConvCache, Dense, ParamRef, Params, LOG_FLOOR,
};

pub const IMAGE_CHANNELS: usize = 3;
pub const ADAPTER_CHANNELS: usize = 3;
pub const CONV1_MAPS: usize = 8;
pub const CONV2_MAPS: usize = 16;
pub const DISC_HIDDEN: usize = 64;
pub const DOMAINS: usize = 2;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Image,
    Flow,
}

impl Domain {
    pub fn tag(self) -> usize {
        match self {
            Domain::Image => 0,
            Domain::Flow => 1,
        }
    }
}

// ---------------------------------------------------------------- losses

/// Mean over rows of `-Σ_d (1/D) ln p_d`. The flag reports whether any
/// probability had to be clamped at `1e-12`.
pub fn loss_adver_confusion(probs: &Array2<f64>) -> (f64, bool) {
    let (n, d) = probs.dim();
    let mut clamped = false;
    let mut total = 0.0;
    for &p in probs.iter() {
        if p <= LOG_FLOOR {
            clamped = true;
        }
        total -= p.max(LOG_FLOOR).ln() / d as f64;
    }
    (total / n as f64, clamped)
}

/// Image-task cross-entropy for one sample plus the weighted confusion
/// term.
pub fn loss_img(logits: &[f64], label: usize, confusion: f64, alpha: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (lse - logits[label]) + alpha * confusion
}

/// Supervised cross-entropy of one discriminator output row.
pub fn loss_disc_supervised(probs: &[f64], domain: usize) -> f64 {
    -probs[domain].max(LOG_FLOOR).ln()
}

// ---------------------------------------------------------------- models

/// Per-domain 1×1 input adapters feeding two shared conv/ReLU/max-pool
/// stages; features are the flattened second-stage maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub image_adapter: Conv2d,
    pub flow_adapter: Conv2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct StemCache {
    adapter: ConvCache,
    conv1: ConvCache,
    relu1: Array4<f64>,
    pool1: Vec<usize>,
}

pub struct TopCache {
    conv2: ConvCache,
    relu2: Array4<f64>,
    pool2: Vec<usize>,
    pooled: (usize, usize, usize, usize),
}

pub struct ExtractorCache {
    stem: StemCache,
    top: TopCache,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(flow_channels: usize, rng: &mut R) -> Self {
        FeatureExtractor {
            image_adapter: Conv2d::new(IMAGE_CHANNELS, ADAPTER_CHANNELS, 1, rng),
            flow_adapter: Conv2d::new(flow_channels, ADAPTER_CHANNELS, 1, rng),
            conv1: Conv2d::new(ADAPTER_CHANNELS, CONV1_MAPS, 3, rng),
            conv2: Conv2d::new(CONV1_MAPS, CONV2_MAPS, 3, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FeatureExtractor {
            image_adapter: self.image_adapter.zeros_like(),
            flow_adapter: self.flow_adapter.zeros_like(),
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    pub fn flow_channels(&self) -> usize {
        self.flow_adapter.in_ch
    }

    pub fn feature_dim(height: usize, width: usize) -> usize {
        CONV2_MAPS * (height / 4) * (width / 4)
    }

    fn adapter(&self, domain: Domain) -> &Conv2d {
        match domain {
            Domain::Image => &self.image_adapter,
            Domain::Flow => &self.flow_adapter,
        }
    }

    fn adapter_mut(&mut self, domain: Domain) -> &mut Conv2d {
        match domain {
            Domain::Image => &mut self.image_adapter,
            Domain::Flow => &mut self.flow_adapter,
        }
    }

    /// Adapter and first conv stage.
    pub fn stem(&self, domain: Domain, x: &Array4<f64>) -> Result<(Array4<f64>, StemCache)> {
        let (a, adapter) = self.adapter(domain).forward(x)?;
        let (c1, conv1) = self.conv1.forward(&a)?;
        let relu1 = relu(&c1);
        let (p1, pool1) = maxpool2(&relu1);
        Ok((p1, StemCache { adapter, conv1, relu1, pool1 }))
    }

    /// Second conv stage and flattening.
    pub fn top(&self, stem_out: &Array4<f64>) -> Result<(Array2<f64>, TopCache)> {
        let (c2, conv2) = self.conv2.forward(stem_out)?;
        let relu2 = relu(&c2);
        let (p2, pool2) = maxpool2(&relu2);
        let pooled = p2.dim();
        let n = pooled.0;
        let feats = p2.into_shape_with_order((n, pooled.1 * pooled.2 * pooled.3)).expect("shape");
        Ok((feats, TopCache { conv2, relu2, pool2, pooled }))
    }

    pub fn forward(&self, domain: Domain, x: &Array4<f64>) -> Result<(Array2<f64>, ExtractorCache)> {
        let (s, stem) = self.stem(domain, x)?;
        let (f, top) = self.top(&s)?;
        Ok((f, ExtractorCache { stem, top }))
    }

    pub fn features(&self, domain: Domain, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(domain, x)?.0)
    }

    /// Backward through the second stage only, accumulating into
    /// `grad.conv2`; returns the gradient for the stem output.
    pub fn top_backward(&self, cache: &TopCache, dfeat: &Array2<f64>, grad: &mut FeatureExtractor) -> Array4<f64> {
        let dp2 = dfeat.to_owned().into_shape_with_order(cache.pooled).expect("shape");
        let drelu2 = maxpool2_backward(cache.relu2.dim(), &cache.pool2, &dp2);
        let dc2 = relu_backward(&cache.relu2, &drelu2);
        self.conv2
            .backward(&cache.conv2, &dc2, &mut grad.conv2, true)
            .expect("input gradient requested")
    }

    pub fn backward(&self, domain: Domain, cache: &ExtractorCache, dfeat: &Array2<f64>, grad: &mut FeatureExtractor) {
        let dp1 = self.top_backward(&cache.top, dfeat, grad);
        let s = &cache.stem;
        let drelu1 = maxpool2_backward(s.relu1.dim(), &s.pool1, &dp1);
        let dc1 = relu_backward(&s.relu1, &drelu1);
        let da = self
            .conv1
            .backward(&s.conv1, &dc1, &mut grad.conv1, true)
            .expect("input gradient requested");
        self.adapter(domain)
            .backward(&s.adapter, &da, grad.adapter_mut(domain), false);
    }
}

impl Params for FeatureExtractor {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        nested(&mut out, "adapter.image", &self.image_adapter);
        nested(&mut out, "adapter.flow", &self.flow_adapter);
        nested(&mut out, "conv1", &self.conv1);
        nested(&mut out, "conv2", &self.conv2);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        nested_mut(&mut out, "adapter.image", &mut self.image_adapter);
        nested_mut(&mut out, "adapter.flow", &mut self.flow_adapter);
        nested_mut(&mut out, "conv1", &mut self.conv1);
        nested_mut(&mut out, "conv2", &mut self.conv2);
        out
    }
}

/// Dense feature → class-logit layer of the image proxy task.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHead {
    pub dense: Dense,
}

impl ImageHead {
    pub fn new<R: Rng>(features: usize, classes: usize, rng: &mut R) -> Self {
        ImageHead { dense: Dense::new(features, classes, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        ImageHead { dense: self.dense.zeros_like() }
    }

    pub fn probabilities(&self, feats: &Array2<f64>) -> Array2<f64> {
        softmax(&self.dense.forward(feats))
    }
}

impl Params for ImageHead {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        nested(&mut out, "dense", &self.dense);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        nested_mut(&mut out, "dense", &mut self.dense);
        out
    }
}

/// Two-layer domain classifier over extractor features.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub hidden: Dense,
    pub out: Dense,
}

pub struct DiscCache {
    x: Array2<f64>,
    h: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStep {
    pub loss: f64,
    pub accuracy: f64,
}

impl Discriminator {
    pub fn new<R: Rng>(features: usize, rng: &mut R) -> Self {
        Discriminator {
            hidden: Dense::new(features, DISC_HIDDEN, rng),
            out: Dense::new(DISC_HIDDEN, DOMAINS, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Discriminator {
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub fn logits(&self, feats: &Array2<f64>) -> (Array2<f64>, DiscCache) {
        let h = relu(&self.hidden.forward(feats));
        let z = self.out.forward(&h);
        (z, DiscCache { x: feats.clone(), h })
    }

    pub fn probabilities(&self, feats: &Array2<f64>) -> Array2<f64> {
        softmax(&self.logits(feats).0)
    }

    /// Accumulates parameter gradients and returns `dL/dfeatures`.
    pub fn backward(&self, cache: &DiscCache, dlogits: &Array2<f64>, grad: &mut Discriminator) -> Array2<f64> {
        let dh = self.out.backward(&cache.h, dlogits, &mut grad.out);
        let dpre = relu_backward(&cache.h, &dh);
        self.hidden.backward(&cache.x, &dpre, &mut grad.hidden)
    }

    /// Supervised loss, accuracy, parameter gradients and feature
    /// gradients on a labelled feature batch.
    pub fn objective(&self, feats: &Array2<f64>, tags: &[usize]) -> (DiscStep, Discriminator, Array2<f64>) {
        let (z, cache) = self.logits(feats);
        let (loss, dz) = softmax_cross_entropy(&z, tags);
        let mut grad = self.zeros_like();
        let dfeat = self.backward(&cache, &dz, &mut grad);
        let accuracy = argmax_accuracy(&z, tags);
        (DiscStep { loss, accuracy }, grad, dfeat)
    }

    /// One gradient step on fixed features.
    pub fn train_step(&mut self, feats: &Array2<f64>, tags: &[usize], lr: f64) -> Result<DiscStep> {
        let (stats, grad, _) = self.objective(feats, tags);
        check_step(stats.loss, &grad)?;
        sgd(self, &grad, lr);
        Ok(stats)
    }
}

impl Params for Discriminator {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        nested(&mut out, "hidden", &self.hidden);
        nested(&mut out, "out", &self.out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        nested_mut(&mut out, "hidden", &mut self.hidden);
        nested_mut(&mut out, "out", &mut self.out);
        out
    }
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn argmax_accuracy(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn check_step(loss: f64, grad: &dyn Params) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Numerical(format!("training diverged (loss {loss})")));
    }
    if !all_finite(grad) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------- steps

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub extractor: FeatureExtractor,
    pub head: ImageHead,
    pub disc: Discriminator,
}

/// A labelled image sub-batch and an unlabelled flow sub-batch. Domain tags
/// are implied by the sub-batch.
#[derive(Debug, Clone)]
pub struct JointBatch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub flows: Array4<f64>,
}

impl JointBatch {
    pub fn validate(&self) -> Result<()> {
        let ni = self.images.dim().0;
        if ni == 0 || self.flows.dim().0 == 0 {
            return Err(Error::invalid("joint batch needs samples from both domains"));
        }
        if ni != self.labels.len() {
            return Err(Error::invalid("image batch and label count differ"));
        }
        Ok(())
    }

    pub fn domain_tags(&self) -> Vec<usize> {
        std::iter::repeat_n(Domain::Image.tag(), self.images.dim().0)
            .chain(std::iter::repeat_n(Domain::Flow.tag(), self.flows.dim().0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorStep {
    /// Batch mean of the combined image objective.
    pub l_img: f64,
    pub cross_entropy: f64,
    pub confusion: f64,
    /// A discriminator probability hit the log floor.
    pub clamped: bool,
}

pub struct ExtractorGrads {
    pub extractor: FeatureExtractor,
    pub head: ImageHead,
}

fn image_task(
    extractor: &FeatureExtractor,
    head: &ImageHead,
    images: &Array4<f64>,
    labels: &[usize],
    grad: &mut ExtractorGrads,
) -> Result<(f64, Array2<f64>, Array2<f64>, ExtractorCache)> {
    let (f, cache) = extractor.forward(Domain::Image, images)?;
    let z = head.dense.forward(&f);
    let (ce, dz) = softmax_cross_entropy(&z, labels);
    let dfeat = head.dense.backward(&f, &dz, &mut grad.head.dense);
    Ok((ce, f, dfeat, cache))
}

/// Value and gradients of the extractor-step objective. The discriminator
/// is only read.
pub fn extractor_objective(model: &JointModel, batch: &JointBatch, alpha: f64) -> Result<(ExtractorStep, ExtractorGrads)> {
    batch.validate()?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let JointModel { extractor, head, disc } = model;
    let mut grad = ExtractorGrads {
        extractor: extractor.zeros_like(),
        head: head.zeros_like(),
    };
    let (ce, f_img, dfeat_img, cache_img) = image_task(extractor, head, &batch.images, &batch.labels, &mut grad)?;
    let (f_of, cache_of) = if alpha > 0.0 {
        let (f, c) = extractor.forward(Domain::Flow, &batch.flows)?;
        (f, Some(c))
    } else {
        (extractor.features(Domain::Flow, &batch.flows)?, None)
    };
    let n_img = f_img.nrows();
    let all = concatenate![Axis(0), f_img, f_of];
    let (z, dcache) = disc.logits(&all);
    let (_, clamped) = loss_adver_confusion(&softmax(&z));
    let (confusion, dz) = softmax_uniform_cross_entropy(&z);

    let mut dfeat_img = dfeat_img;
    if let Some(cache_of) = cache_of {
        let mut scratch = disc.zeros_like();
        let dall = disc.backward(&dcache, &(dz * alpha), &mut scratch);
        dfeat_img += &dall.slice(ndarray::s![..n_img, ..]);
        let dfeat_of = dall.slice(ndarray::s![n_img.., ..]).to_owned();
        extractor.backward(Domain::Flow, &cache_of, &dfeat_of, &mut grad.extractor);
    }
    extractor.backward(Domain::Image, &cache_img, &dfeat_img, &mut grad.extractor);

    let stats = ExtractorStep {
        l_img: ce + alpha * confusion,
        cross_entropy: ce,
        confusion,
        clamped,
    };
    Ok((stats, grad))
}

/// One descent step on the image objective with respect to the extractor
/// and image head.
pub fn step_extractor(model: &mut JointModel, batch: &JointBatch, alpha: f64, lr: f64) -> Result<ExtractorStep> {
    let (stats, grad) = extractor_objective(model, batch, alpha)?;
    check_step(stats.l_img, &grad.extractor)?;
    check_step(stats.l_img, &grad.head)?;
    sgd(&mut model.extractor, &grad.extractor, lr);
    sgd(&mut model.head, &grad.head, lr);
    Ok(stats)
}

/// Supervised discriminator objective on the batch's features, with
/// optional gradients for the extractor.
pub fn discriminator_objective(
    model: &JointModel,
    batch: &JointBatch,
    through_extractor: bool,
) -> Result<(DiscStep, Discriminator, Option<FeatureExtractor>)> {
    batch.validate()?;
    let ex = &model.extractor;
    let (fi, ci) = ex.forward(Domain::Image, &batch.images)?;
    let (fo, co) = ex.forward(Domain::Flow, &batch.flows)?;
    let n_img = fi.nrows();
    let all = concatenate![Axis(0), fi, fo];
    let tags = batch.domain_tags();
    let (stats, grad, dfeat) = model.disc.objective(&all, &tags);
    let ex_grad = through_extractor.then(|| {
        let mut g = ex.zeros_like();
        ex.backward(Domain::Image, &ci, &dfeat.slice(ndarray::s![..n_img, ..]).to_owned(), &mut g);
        ex.backward(Domain::Flow, &co, &dfeat.slice(ndarray::s![n_img.., ..]).to_owned(), &mut g);
        g
    });
    Ok((stats, grad, ex_grad))
}

/// One descent step on the supervised domain loss. The extractor is
/// updated too only when `update_extractor` is set.
pub fn step_discriminator(model: &mut JointModel, batch: &JointBatch, lr: f64, update_extractor: bool) -> Result<DiscStep> {
    let (stats, grad, ex_grad) = discriminator_objective(model, batch, update_extractor)?;
    check_step(stats.loss, &grad)?;
    if let Some(g) = &ex_grad {
        check_step(stats.loss, g)?;
        sgd(&mut model.extractor, g, lr);
    }
    sgd(&mut model.disc, &grad, lr);
    Ok(stats)
}

// ---------------------------------------------------------------- training

/// Labelled proxy images, `n × 3 × h × w`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c, ..) = self.images.dim();
        if n == 0 {
            return Err(Error::invalid("image set is empty"));
        }
        if n != self.labels.len() || c != IMAGE_CHANNELS {
            return Err(Error::invalid(format!(
                "image set shape {:?} does not match {} labels",
                self.images.dim(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::invalid(format!("image label {bad} out of range for {} classes", self.classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub alpha: f64,
    pub lr: f64,
    pub disc_lr: f64,
    pub steps: usize,
    /// Samples per domain in every sub-batch.
    pub batch: usize,
    pub seed: u64,
    /// Also descend the discriminator loss with respect to the extractor.
    pub disc_updates_extractor: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            alpha: 0.1,
            lr: 0.05,
            disc_lr: 0.05,
            steps: 300,
            batch: 16,
            seed: 0,
            disc_updates_extractor: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLogRow {
    pub step: usize,
    pub l_img: f64,
    pub l_adver_confusion: f64,
    pub l_disc: f64,
    pub disc_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointLog {
    pub rows: Vec<JointLogRow>,
}

impl JointLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,L_img,L_adver_confusion,L_disc,disc_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.l_img, r.l_adver_confusion, r.l_disc, r.disc_accuracy
            ));
        }
        out
    }
}

/// Independent random streams so that enabling the adversary never
/// perturbs the image-task sampling.
struct Streams {
    image: ChaCha8Rng,
    flow: ChaCha8Rng,
    disc: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn init_models(flow_channels: usize, classes: usize, h: usize, w: usize, seed: u64) -> (FeatureExtractor, ImageHead) {
    let extractor = FeatureExtractor::new(flow_channels, &mut stream(seed, 0));
    let head = ImageHead::new(FeatureExtractor::feature_dim(h, w), classes, &mut stream(seed, 1));
    (extractor, head)
}

fn pick<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        let mut all: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            all.swap(i, rng.random_range(0..=i));
        }
        all
    } else {
        sample(rng, n, k).into_vec()
    }
}

pub fn gather(x: &Array4<f64>, idx: &[usize]) -> Array4<f64> {
    x.select(Axis(0), idx)
}

/// Indexed collection of single flow frames, `channels × h × w` each.
pub trait FrameSource {
    fn frame_count(&self) -> usize;
    fn channels(&self) -> usize;
    fn frame_size(&self) -> (usize, usize);
    /// Stacks the requested frames into `idx.len() × channels × h × w`.
    fn gather(&self, idx: &[usize]) -> Array4<f64>;
}

impl FrameSource for Array4<f64> {
    fn frame_count(&self) -> usize {
        self.dim().0
    }

    fn channels(&self) -> usize {
        self.dim().1
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.dim().2, self.dim().3)
    }

    fn gather(&self, idx: &[usize]) -> Array4<f64> {
        gather(self, idx)
    }
}

fn check_shapes(images: &ImageSet, flows: &dyn FrameSource) -> Result<()> {
    images.validate()?;
    let (_, _, h, w) = images.images.dim();
    let m = flows.frame_count();
    let (fh, fw) = flows.frame_size();
    if m == 0 {
        return Err(Error::invalid("flow set is empty"));
    }
    if (h, w) != (fh, fw) {
        return Err(Error::invalid(format!("image size {h}x{w} differs from flow size {fh}x{fw}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::invalid("frames must be at least 4x4"));
    }
    Ok(())
}

fn validate_config(cfg: &JointConfig) -> Result<()> {
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(cfg.disc_lr >= 0.0) || !cfg.alpha.is_finite() || cfg.alpha < 0.0 {
        return Err(Error::invalid(format!("invalid joint training config {cfg:?}")));
    }
    Ok(())
}

/// Alternates one extractor step and one discriminator step per
/// iteration. `flows` holds single flow frames, `m × channels × h × w`.
pub fn joint_train(images: &ImageSet, flows: &dyn FrameSource, cfg: &JointConfig) -> Result<(JointModel, JointLog)> {
    check_shapes(images, flows)?;
    validate_config(cfg)?;
    let (_, _, h, w) = images.images.dim();
    let (extractor, head) = init_models(flows.channels(), images.classes, h, w, cfg.seed);
    let disc = Discriminator::new(FeatureExtractor::feature_dim(h, w), &mut stream(cfg.seed, 2));
    let mut model = JointModel { extractor, head, disc };
    let mut rngs = Streams {
        image: stream(cfg.seed, 3),
        flow: stream(cfg.seed, 4),
        disc: stream(cfg.seed, 5),
    };
    let mut log = JointLog::default();
    for step in 0..cfg.steps {
        let ii = pick(&mut rngs.image, images.len(), cfg.batch);
        let fi = pick(&mut rngs.flow, flows.frame_count(), cfg.batch);
        let batch = JointBatch {
            images: gather(&images.images, &ii),
            labels: ii.iter().map(|&i| images.labels[i]).collect(),
            flows: flows.gather(&fi),
        };
        let ex = step_extractor(&mut model, &batch, cfg.alpha, cfg.lr)?;

        let ii = pick(&mut rngs.disc, images.len(), cfg.batch);
        let fi = pick(&mut rngs.disc, flows.frame_count(), cfg.batch);
        let dbatch = JointBatch {
            images: gather(&images.images, &ii),
            labels: ii.iter().map(|&i| images.labels[i]).collect(),
            flows: flows.gather(&fi),
        };
        let d = step_discriminator(&mut model, &dbatch, cfg.disc_lr, cfg.disc_updates_extractor)?;
        log.rows.push(JointLogRow {
            step,
            l_img: ex.l_img,
            l_adver_confusion: ex.confusion,
            l_disc: d.loss,
            disc_accuracy: d.accuracy,
        });
    }
    Ok((model, log))
}

/// Image-task training with no adversary, sharing initialisation and
/// sampling with [`joint_train`] for the same seed.
pub fn train_image_only(images: &ImageSet, flow_channels: usize, cfg: &JointConfig) -> Result<(FeatureExtractor, ImageHead)> {
    images.validate()?;
    validate_config(cfg)?;
    let (_, _, h, w) = images.images.dim();
    let (mut extractor, mut head) = init_models(flow_channels, images.classes, h, w, cfg.seed);
    let mut rng = stream(cfg.seed, 3);
    for _ in 0..cfg.steps {
        let ii = pick(&mut rng, images.len(), cfg.batch);
        let labels: Vec<usize> = ii.iter().map(|&i| images.labels[i]).collect();
        let mut grad = ExtractorGrads {
            extractor: extractor.zeros_like(),
            head: head.zeros_like(),
        };
        let (ce, _, dfeat, cache) = image_task(&extractor, &head, &gather(&images.images, &ii), &labels, &mut grad)?;
        extractor.backward(Domain::Image, &cache, &dfeat, &mut grad.extractor);
        check_step(ce, &grad.extractor)?;
        check_step(ce, &grad.head)?;
        sgd(&mut extractor, &grad.extractor, cfg.lr);
        sgd(&mut head, &grad.head, cfg.lr);
    }
    Ok((extractor, head))
}

/// Extractor features of a large stack, evaluated in fixed-size chunks.
pub fn batched_features(extractor: &FeatureExtractor, domain: Domain, x: &Array4<f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 64;
    let n = x.dim().0;
    let parts: Result<Vec<Array2<f64>>> = (0..n)
        .step_by(CHUNK)
        .map(|s| extractor.features(domain, &x.slice(ndarray::s![s..(s + CHUNK).min(n), .., .., ..]).to_owned()))
        .collect();
    let parts = parts?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("feature widths agree"))
}

pub fn image_accuracy(extractor: &FeatureExtractor, head: &ImageHead, images: &ImageSet) -> Result<f64> {
    let f = batched_features(extractor, Domain::Image, &images.images)?;
    Ok(argmax_accuracy(&head.dense.forward(&f), &images.labels))
}

/// Mean of the per-domain accuracies of the discriminator on held-out
/// samples of both domains.
pub fn discriminator_accuracy(model: &JointModel, images: &Array4<f64>, flows: &dyn FrameSource) -> Result<f64> {
    let fi = batched_features(&model.extractor, Domain::Image, images)?;
    let all: Vec<usize> = (0..flows.frame_count()).collect();
    let fo = batched_features(&model.extractor, Domain::Flow, &flows.gather(&all))?;
    let ai = argmax_accuracy(&model.disc.logits(&fi).0, &vec![Domain::Image.tag(); fi.nrows()]);
    let ao = argmax_accuracy(&model.disc.logits(&fo).0, &vec![Domain::Flow.tag(); fo.nrows()]);
    Ok((ai + ao) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::flat;
    use crate::nn::gradcheck::check_params;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
        Array4::from_shape_simple_fn(d, || rng.random_range(-scale..scale))
    }

    fn tiny_model(rng: &mut ChaCha8Rng) -> JointModel {
        let extractor = FeatureExtractor::new(4, rng);
        let f = FeatureExtractor::feature_dim(8, 8);
        let mut head = ImageHead::new(f, 5, rng);
        head.dense.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        JointModel { extractor, head, disc: Discriminator::new(f, rng) }
    }

    fn tiny_batch(rng: &mut ChaCha8Rng) -> JointBatch {
        JointBatch {
            images: rand4(rng, (3, 3, 8, 8), 1.0),
            labels: vec![0, 3, 4],
            flows: rand4(rng, (2, 4, 8, 8), 1.0),
        }
    }

    #[test]
    fn confusion_values() {
        let (u, c) = loss_adver_confusion(&Array2::from_elem((3, 2), 0.5));
        assert!((u - 2f64.ln()).abs() < 1e-12 && !c);
        let p = Array2::from_shape_vec((1, 2), vec![0.9, 0.1]).unwrap();
        assert!((loss_adver_confusion(&p).0 - 1.2040).abs() < 1e-4);
        let edge = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let (v, clamped) = loss_adver_confusion(&edge);
        assert!(clamped);
        assert!((v - (-0.5 * 1e-12f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn confusion_minimised_at_uniform() {
        let at = |p: f64| loss_adver_confusion(&Array2::from_shape_vec((1, 2), vec![p, 1.0 - p]).unwrap()).0;
        let centre = at(0.5);
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            if i != 500 {
                assert!(at(p) > centre, "p={p}");
            }
        }
    }

    #[test]
    fn image_loss_values() {
        let uniform = [0.0; 10];
        assert!((loss_img(&uniform, 3, 0.0, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!((loss_img(&uniform, 3, 2f64.ln(), 1.0) - (10f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((loss_img(&uniform, 3, 2f64.ln(), 1.0) - 2.9957).abs() < 1e-4);
        let z = [1.0, -2.0, 0.5];
        assert_eq!(loss_img(&z, 0, 123.0, 0.0), loss_img(&z, 0, 0.0, 0.0));
    }

    #[test]
    fn supervised_disc_values() {
        assert_eq!(loss_disc_supervised(&[1.0, 0.0], 0), 0.0);
        assert!((loss_disc_supervised(&[0.5, 0.5], 1) - 2f64.ln()).abs() < 1e-12);
        assert!((loss_disc_supervised(&[0.1, 0.9], 0) - 0.1f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn feature_dims_agree_across_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = FeatureExtractor::new(10, &mut rng);
        let fi = ex.features(Domain::Image, &rand4(&mut rng, (2, 3, 32, 32), 1.0)).unwrap();
        let fo = ex.features(Domain::Flow, &rand4(&mut rng, (3, 10, 32, 32), 1.0)).unwrap();
        assert_eq!(fi.ncols(), 1024);
        assert_eq!(fo.ncols(), 1024);
        assert!(ex.features(Domain::Flow, &rand4(&mut rng, (1, 3, 32, 32), 1.0)).is_err());
    }

    #[test]
    fn extractor_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(&mut rng);
        let batch = tiny_batch(&mut rng);
        let alpha = 0.7;
        let (_, grad) = extractor_objective(&model, &batch, alpha).unwrap();
        let loss_ex = |ex: &FeatureExtractor| {
            let m = JointModel { extractor: ex.clone(), ..model.clone() };
            extractor_objective(&m, &batch, alpha).unwrap().0.l_img
        };
        let err = check_params(&model.extractor, &grad.extractor, 400, loss_ex);
        assert!(err < 1e-4, "extractor {err}");
        let loss_head = |h: &ImageHead| {
            let m = JointModel { head: h.clone(), ..model.clone() };
            extractor_objective(&m, &batch, alpha).unwrap().0.l_img
        };
        let err = check_params(&model.head, &grad.head, 200, loss_head);
        assert!(err < 1e-4, "head {err}");
    }

    #[test]
    fn discriminator_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(&mut rng);
        let batch = tiny_batch(&mut rng);
        let (_, grad, ex_grad) = discriminator_objective(&model, &batch, true).unwrap();
        let loss_d = |d: &Discriminator| {
            let m = JointModel { disc: d.clone(), ..model.clone() };
            discriminator_objective(&m, &batch, false).unwrap().0.loss
        };
        assert!(check_params(&model.disc, &grad, 300, loss_d) < 1e-4);
        let loss_ex = |ex: &FeatureExtractor| {
            let m = JointModel { extractor: ex.clone(), ..model.clone() };
            discriminator_objective(&m, &batch, false).unwrap().0.loss
        };
        assert!(check_params(&model.extractor, &ex_grad.unwrap(), 300, loss_ex) < 1e-4);
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = tiny_model(&mut rng);
        let before = model.clone();
        let batch = tiny_batch(&mut rng);
        step_extractor(&mut model, &batch, 0.5, 0.0).unwrap();
        step_discriminator(&mut model, &batch, 0.0, true).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn extractor_step_freezes_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = tiny_model(&mut rng);
        let disc = model.disc.clone();
        let batch = tiny_batch(&mut rng);
        step_extractor(&mut model, &batch, 1.0, 0.1).unwrap();
        assert_eq!(model.disc, disc);
        let (ex, head) = (model.extractor.clone(), model.head.clone());
        step_discriminator(&mut model, &batch, 0.1, false).unwrap();
        assert_eq!((model.extractor, model.head), (ex, head));
    }

    #[test]
    fn zero_alpha_is_plain_image_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = tiny_model(&mut rng);
        let batch = tiny_batch(&mut rng);
        let (stats, grad) = extractor_objective(&model, &batch, 0.0).unwrap();
        let mut plain = ExtractorGrads {
            extractor: model.extractor.zeros_like(),
            head: model.head.zeros_like(),
        };
        let (ce, _, dfeat, cache) = image_task(&model.extractor, &model.head, &batch.images, &batch.labels, &mut plain).unwrap();
        model.extractor.backward(Domain::Image, &cache, &dfeat, &mut plain.extractor);
        assert_eq!(stats.l_img, ce);
        assert_eq!(flat(&grad.extractor), flat(&plain.extractor));
        assert_eq!(flat(&grad.head), flat(&plain.head));
        // the flow adapter receives nothing without the adversary
        assert!(flat(&grad.extractor.flow_adapter).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_shift_leaves_extractor_step_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(&mut rng);
        let batch = tiny_batch(&mut rng);
        let (a, ga) = extractor_objective(&model, &batch, 0.3).unwrap();
        let mut shifted = model.clone();
        shifted.head.dense.b += 5.0;
        let (b, gb) = extractor_objective(&shifted, &batch, 0.3).unwrap();
        assert!((a.l_img - b.l_img).abs() < 1e-9);
        for (x, y) in flat(&ga.extractor).iter().zip(flat(&gb.extractor)) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in flat(&ga.head).iter().zip(flat(&gb.head)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn discriminator_step_never_increases_its_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = tiny_model(&mut rng);
        let batch = tiny_batch(&mut rng);
        for _ in 0..20 {
            let before = discriminator_objective(&model, &batch, false).unwrap().0.loss;
            step_discriminator(&mut model, &batch, 1e-3, false).unwrap();
            let after = discriminator_objective(&model, &batch, false).unwrap().0.loss;
            assert!(after <= before);
        }
    }

    fn two_clusters(rng: &mut ChaCha8Rng, n: usize, d: usize, gap: f64) -> (Array2<f64>, Vec<usize>) {
        let tags: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            let centre = if j == 0 { gap * (tags[i] as f64 - 0.5) } else { 0.0 };
            centre + rng.random_range(-1.0..1.0)
        });
        (x, tags)
    }

    #[test]
    fn discriminator_learns_separable_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut disc = Discriminator::new(8, &mut rng);
        let mut last = 0.0;
        for _ in 0..100 {
            let (x, tags) = two_clusters(&mut rng, 32, 8, 6.0);
            last = disc.train_step(&x, &tags, 0.1).unwrap().accuracy;
        }
        let (x, tags) = two_clusters(&mut rng, 400, 8, 6.0);
        let acc = disc.objective(&x, &tags).0.accuracy;
        assert!(acc > 0.9 && last > 0.9, "{acc} {last}");
    }

    #[test]
    fn discriminator_at_chance_on_identical_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut disc = Discriminator::new(8, &mut rng);
        for _ in 0..100 {
            let (x, tags) = two_clusters(&mut rng, 32, 8, 0.0);
            disc.train_step(&x, &tags, 0.1).unwrap();
        }
        let (x, tags) = two_clusters(&mut rng, 2000, 8, 0.0);
        let acc = disc.objective(&x, &tags).0.accuracy;
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    fn toy_sets(seed: u64) -> (ImageSet, Array4<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let images = Array4::from_shape_fn((n, 3, 8, 8), |(i, c, y, x)| {
            let k = labels[i];
            let v = if k == 0 { x as f64 / 8.0 } else if k == 1 { y as f64 / 8.0 } else { ((x + y) % 2) as f64 };
            (v + 0.1 * c as f64 + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
        });
        let flows = rand4(&mut rng, (30, 4, 8, 8), 0.5);
        (ImageSet { images, labels, classes: 3 }, flows)
    }

    #[test]
    fn zero_alpha_matches_image_only_control() {
        let (images, flows) = toy_sets(11);
        let cfg = JointConfig { alpha: 0.0, steps: 25, batch: 6, seed: 3, ..Default::default() };
        let (model, log) = joint_train(&images, &flows, &cfg).unwrap();
        let (ex, head) = train_image_only(&images, 4, &cfg).unwrap();
        assert_eq!(model.extractor, ex);
        assert_eq!(model.head, head);
        assert_eq!(
            image_accuracy(&model.extractor, &model.head, &images).unwrap().to_bits(),
            image_accuracy(&ex, &head, &images).unwrap().to_bits()
        );
        assert_eq!(log.rows.len(), 25);
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (images, flows) = toy_sets(12);
        let cfg = JointConfig { alpha: 0.5, steps: 15, batch: 5, seed: 9, ..Default::default() };
        let (m1, l1) = joint_train(&images, &flows, &cfg).unwrap();
        let (m2, l2) = joint_train(&images, &flows, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1.to_csv(), l2.to_csv());
        let csv = l1.to_csv();
        assert!(csv.starts_with("step,L_img,L_adver_confusion,L_disc,disc_accuracy\n"));
        assert_eq!(csv.lines().count(), 16);
        let (m3, _) = joint_train(&images, &flows, &JointConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn image_task_learns() {
        let (images, flows) = toy_sets(13);
        let cfg = JointConfig { alpha: 0.1, steps: 300, batch: 8, lr: 0.1, seed: 1, ..Default::default() };
        let (model, _) = joint_train(&images, &flows, &cfg).unwrap();
        assert!(image_accuracy(&model.extractor, &model.head, &images).unwrap() > 0.9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (images, flows) = toy_sets(14);
        let cfg = JointConfig::default();
        assert!(joint_train(&images, &Array4::zeros((0, 4, 8, 8)), &cfg).is_err());
        assert!(joint_train(&images, &Array4::zeros((3, 4, 16, 16)), &cfg).is_err());
        let bad = ImageSet { classes: 2, ..images.clone() };
        assert!(joint_train(&bad, &flows, &cfg).is_err());
        let batch = JointBatch { images: Array4::zeros((0, 3, 8, 8)), labels: vec![], flows: flows.clone() };
        assert!(batch.validate().is_err());
    }

    #[test]
    fn divergence_is_numerical_error() {
        let (images, flows) = toy_sets(15);
        let cfg = JointConfig { lr: 1e6, steps: 50, batch: 8, ..Default::default() };
        let err = joint_train(&images, &flows, &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }
}
