//! Sequence classifier over per-frame extractor features: two stacked LSTM
//! layers, dropout on the last hidden state, a 64-unit rectified dense
//! layer and a softmax output.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::jointtrain::{argmax, FeatureExtractor, DIVERGENCE_LIMIT};
use crate::nn::{
    all_finite, dropout_mask, nested, nested_mut, relu, relu_backward, sgd, softmax, softmax_cross_entropy, Dense,
    Lstm, LstmCache, ParamRef, Params,
};

pub const HIDDEN: usize = 128;
pub const DENSE: usize = 64;
pub const DROPOUT: f64 = 0.25;

/// Fixed per-feature input map `(x - shift) * scale`, fitted on training
/// features and not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        InputNorm {
            shift: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    /// Mean and inverse standard deviation over every step of every
    /// sequence. Constant features keep unit scale.
    pub fn fit(sequences: &[Array2<f64>]) -> Result<Self> {
        let dim = sequences.first().map(|s| s.ncols()).ok_or_else(|| Error::invalid("no sequences to normalise"))?;
        let mut sum = Array1::<f64>::zeros(dim);
        let mut sq = Array1::<f64>::zeros(dim);
        let mut count = 0usize;
        for seq in sequences {
            if seq.ncols() != dim {
                return Err(Error::invalid("sequences differ in feature width"));
            }
            sum += &seq.sum_axis(Axis(0));
            sq += &seq.mapv(|v| v * v).sum_axis(Axis(0));
            count += seq.nrows();
        }
        let n = count.max(1) as f64;
        let shift = sum / n;
        let scale = ndarray::Zip::from(&sq).and(&shift).map_collect(|&q, &m| {
            let var = (q / n - m * m).max(0.0);
            if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
        });
        Ok(InputNorm { shift, scale })
    }

    fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        (x - &self.shift) * &self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    pub norm: InputNorm,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub dense1: Dense,
    pub dense2: Dense,
    pub dropout: f64,
}

pub struct ClassifierCache {
    lstm1: LstmCache,
    lstm2: LstmCache,
    h2_shape: (usize, usize, usize),
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    d1: Array2<f64>,
}

impl ClassifierNet {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, dense: usize, classes: usize, dropout: f64, rng: &mut R) -> Self {
        ClassifierNet {
            norm: InputNorm::identity(inputs),
            lstm1: Lstm::new(inputs, hidden, rng),
            lstm2: Lstm::new(hidden, hidden, rng),
            dense1: Dense::new(hidden, dense, rng),
            dense2: Dense::new(dense, classes, rng),
            dropout,
        }
    }

    /// Layer sizes from the defaults.
    pub fn standard<R: Rng>(inputs: usize, classes: usize, rng: &mut R) -> Self {
        Self::new(inputs, HIDDEN, DENSE, classes, DROPOUT, rng)
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierNet {
            norm: self.norm.clone(),
            lstm1: self.lstm1.zeros_like(),
            lstm2: self.lstm2.zeros_like(),
            dense1: self.dense1.zeros_like(),
            dense2: self.dense2.zeros_like(),
            dropout: self.dropout,
        }
    }

    pub fn inputs(&self) -> usize {
        self.lstm1.inputs()
    }

    pub fn classes(&self) -> usize {
        self.dense2.outputs()
    }

    /// Logits for `x` (`T × n × inputs`). `mask` multiplies the final
    /// hidden state; `None` is the inference pass.
    pub fn forward(&self, x: &Array3<f64>, mask: Option<Array2<f64>>) -> Result<(Array2<f64>, ClassifierCache)> {
        if x.dim().0 == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if x.dim().2 != self.inputs() {
            return Err(Error::invalid(format!("classifier expects {} inputs, got {}", self.inputs(), x.dim().2)));
        }
        let (h1, lstm1) = self.lstm1.forward(&self.norm.apply(x))?;
        let (h2, lstm2) = self.lstm2.forward(&h1)?;
        let last = h2.index_axis(Axis(0), h2.dim().0 - 1).to_owned();
        let dropped = match &mask {
            Some(m) => &last * m,
            None => last.clone(),
        };
        let d1 = relu(&self.dense1.forward(&dropped));
        let logits = self.dense2.forward(&d1);
        let cache = ClassifierCache {
            lstm1,
            lstm2,
            h2_shape: h2.dim(),
            mask,
            dropped,
            d1,
        };
        Ok((logits, cache))
    }

    /// Accumulates gradients; returns `dL/dx` when requested.
    pub fn backward(&self, cache: &ClassifierCache, dlogits: &Array2<f64>, grad: &mut ClassifierNet, need_dx: bool) -> Option<Array3<f64>> {
        let dd1 = self.dense2.backward(&cache.d1, dlogits, &mut grad.dense2);
        let dpre = relu_backward(&cache.d1, &dd1);
        let mut dlast = self.dense1.backward(&cache.dropped, &dpre, &mut grad.dense1);
        if let Some(m) = &cache.mask {
            dlast *= m;
        }
        let mut dh2 = Array3::zeros(cache.h2_shape);
        dh2.index_axis_mut(Axis(0), cache.h2_shape.0 - 1).assign(&dlast);
        let dh1 = self
            .lstm2
            .backward(&cache.lstm2, &dh2, &mut grad.lstm2, true)
            .expect("input gradient requested");
        self.lstm1
            .backward(&cache.lstm1, &dh1, &mut grad.lstm1, need_dx)
            .map(|dx| dx * &self.norm.scale)
    }

    /// Class probabilities with dropout disabled, `n × K`.
    pub fn probabilities(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        Ok(softmax(&self.forward(x, None)?.0))
    }
}

impl Params for ClassifierNet {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        nested(&mut out, "lstm1", &self.lstm1);
        nested(&mut out, "lstm2", &self.lstm2);
        nested(&mut out, "dense1", &self.dense1);
        nested(&mut out, "dense2", &self.dense2);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        nested_mut(&mut out, "lstm1", &mut self.lstm1);
        nested_mut(&mut out, "lstm2", &mut self.lstm2);
        nested_mut(&mut out, "dense1", &mut self.dense1);
        nested_mut(&mut out, "dense2", &mut self.dense2);
        out
    }
}

/// Hidden states of one layer for a single sequence (`T × inputs`).
pub fn lstm_forward(layer: &Lstm, seq: &Array2<f64>) -> Result<Array2<f64>> {
    let (t, i) = seq.dim();
    let x = seq.to_owned().into_shape_with_order((t, 1, i)).expect("shape");
    let (h, _) = layer.forward(&x)?;
    Ok(h.into_shape_with_order((t, layer.hidden())).expect("shape"))
}

/// Class probabilities for one feature sequence (`T × inputs`).
pub fn classify(net: &ClassifierNet, seq: &Array2<f64>) -> Result<Vec<f64>> {
    let (t, i) = seq.dim();
    if i != net.inputs() {
        return Err(Error::invalid(format!("classifier expects {} features per step, got {i}", net.inputs())));
    }
    let x = seq.to_owned().into_shape_with_order((t, 1, i)).expect("shape");
    Ok(net.probabilities(&x)?.row(0).to_vec())
}

/// Labelled feature sequences, each `T × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub sequences: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::invalid("sequence set is empty"));
        }
        if self.sequences.len() != self.labels.len() {
            return Err(Error::invalid("sequence and label counts differ"));
        }
        let dim = self.sequences[0].dim();
        if self.sequences.iter().any(|s| s.dim() != dim) {
            return Err(Error::invalid("sequences differ in shape"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {} classes", self.classes)));
        }
        Ok(())
    }

    /// Time-major batch `T × n × F` of the given samples.
    pub fn batch(&self, idx: &[usize]) -> Array3<f64> {
        let (t, f) = self.sequences[0].dim();
        let mut x = Array3::zeros((t, idx.len(), f));
        for (j, &i) in idx.iter().enumerate() {
            x.slice_mut(s![.., j, ..]).assign(&self.sequences[i]);
        }
        x
    }

    pub fn subset(&self, idx: &[usize]) -> SequenceSet {
        SequenceSet {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Per-frame flow inputs for fine-tuning: the extractor's frozen first
/// stage output for each sample, `T × maps × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSet {
    pub stems: Vec<Array4<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.05,
            epochs: 30,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassifierLog {
    pub rows: Vec<ClassifierLogRow>,
}

impl ClassifierLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.train_accuracy));
        }
        out
    }
}

fn shuffled<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

fn check(loss: f64, grad: &dyn Params) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Numerical(format!("classifier training diverged (loss {loss})")));
    }
    if !all_finite(grad) {
        return Err(Error::Numerical("non-finite classifier gradient".into()));
    }
    Ok(())
}

/// Shared mini-batch loop. `step` gets the batch indices and the dropout
/// mask and returns (loss, hits) after applying its own update.
fn run_epochs(
    n: usize,
    cfg: &ClassifierConfig,
    mut step: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<(f64, usize)>,
) -> Result<ClassifierLog> {
    if cfg.batch == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::invalid(format!("invalid classifier config {cfg:?}")));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut log = ClassifierLog::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(&mut order_rng, n);
        let (mut total, mut hits) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let (loss, h) = step(chunk, &mut mask_rng)?;
            total += loss * chunk.len() as f64;
            hits += h;
        }
        log.rows.push(ClassifierLogRow {
            epoch,
            loss: total / n as f64,
            train_accuracy: hits as f64 / n as f64,
        });
    }
    Ok(log)
}

fn hits(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &y)| argmax(r.view()) == y)
        .count()
}

/// Loss and gradients of one mini-batch with a given dropout mask.
pub fn batch_objective(net: &ClassifierNet, x: &Array3<f64>, labels: &[usize], mask: Option<Array2<f64>>) -> Result<(f64, ClassifierNet, Array2<f64>)> {
    let (logits, cache) = net.forward(x, mask)?;
    let (loss, dz) = softmax_cross_entropy(&logits, labels);
    let mut grad = net.zeros_like();
    net.backward(&cache, &dz, &mut grad, false);
    Ok((loss, grad, logits))
}

/// Mini-batch gradient descent with backpropagation through time and
/// per-batch seeded dropout masks.
pub fn train_classifier(net: &mut ClassifierNet, data: &SequenceSet, cfg: &ClassifierConfig) -> Result<ClassifierLog> {
    data.validate()?;
    if data.sequences[0].ncols() != net.inputs() || data.classes > net.classes() {
        return Err(Error::invalid("dataset does not match the classifier dimensions"));
    }
    run_epochs(data.len(), cfg, |idx, rng| {
        let x = data.batch(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mask = dropout_mask((idx.len(), net.lstm2.hidden()), net.dropout, rng);
        let (loss, grad, logits) = batch_objective(net, &x, &labels, Some(mask))?;
        check(loss, &grad)?;
        sgd(net, &grad, cfg.lr);
        Ok((loss, hits(&logits, &labels)))
    })
}

/// As [`train_classifier`], additionally updating the extractor's last
/// convolution from per-frame stem activations.
pub fn train_classifier_finetuned(
    net: &mut ClassifierNet,
    extractor: &mut FeatureExtractor,
    data: &StemSet,
    cfg: &ClassifierConfig,
) -> Result<ClassifierLog> {
    if data.stems.is_empty() || data.stems.len() != data.labels.len() {
        return Err(Error::invalid("stem set is empty or mislabelled"));
    }
    let (t, c, h, w) = data.stems[0].dim();
    run_epochs(data.labels.len(), cfg, |idx, rng| {
        let n = idx.len();
        let mut stems = Array4::zeros((t * n, c, h, w));
        for (j, &i) in idx.iter().enumerate() {
            for step in 0..t {
                stems.slice_mut(s![step * n + j, .., .., ..]).assign(&data.stems[i].slice(s![step, .., .., ..]));
            }
        }
        let (feats, top) = extractor.top(&stems)?;
        let f = feats.ncols();
        let x = feats.into_shape_with_order((t, n, f)).expect("shape");
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mask = dropout_mask((n, net.lstm2.hidden()), net.dropout, rng);
        let (logits, cache) = net.forward(&x, Some(mask))?;
        let (loss, dz) = softmax_cross_entropy(&logits, &labels);
        let mut grad = net.zeros_like();
        let dx = net.backward(&cache, &dz, &mut grad, true).expect("input gradient requested");
        let mut ex_grad = extractor.zeros_like();
        extractor.top_backward(&top, &dx.into_shape_with_order((t * n, f)).expect("shape"), &mut ex_grad);
        check(loss, &grad)?;
        check(loss, &ex_grad)?;
        sgd(net, &grad, cfg.lr);
        sgd(&mut extractor.conv2, &ex_grad.conv2, cfg.lr);
        Ok((loss, hits(&logits, &labels)))
    })
}

/// Accuracy and K×K confusion matrix (rows true class, columns predicted).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Array2<usize>,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty test set"));
        }
        let mut confusion = Array2::zeros((classes, classes));
        for (&p, &y) in predicted.iter().zip(truth) {
            if p >= classes || y >= classes {
                return Err(Error::invalid(format!("class id out of range for {classes} classes")));
            }
            confusion[[y, p]] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[[k, k]]).sum();
        Ok(EvalReport {
            accuracy: correct as f64 / truth.len() as f64,
            confusion,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.nrows()
    }

    /// Relabels classes: old class `k` becomes `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.classes();
        let mut confusion = Array2::zeros((k, k));
        for r in 0..k {
            for c in 0..k {
                confusion[[perm[r], perm[c]]] = self.confusion[[r, c]];
            }
        }
        EvalReport {
            accuracy: self.accuracy,
            confusion,
        }
    }

    /// Confusion matrix rows as CSV, then `accuracy=<value>`.
    pub fn to_csv(&self) -> String {
        let k = self.classes();
        let mut out = String::from("true\\pred");
        for c in 0..k {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for r in 0..k {
            out.push_str(&r.to_string());
            for c in 0..k {
                out.push_str(&format!(",{}", self.confusion[[r, c]]));
            }
            out.push('\n');
        }
        out.push_str(&format!("accuracy={}\n", self.accuracy));
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::malformed("evaluation report", m.to_string());
        let mut rows = Vec::new();
        let mut accuracy = None;
        for (i, line) in text.lines().enumerate() {
            if let Some(v) = line.strip_prefix("accuracy=") {
                accuracy = Some(v.trim().parse::<f64>().map_err(|_| bad("bad accuracy"))?);
            } else if i > 0 && !line.trim().is_empty() {
                let row: std::result::Result<Vec<usize>, _> = line.split(',').skip(1).map(|v| v.trim().parse()).collect();
                rows.push(row.map_err(|_| bad("bad count"))?);
            }
        }
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(bad("confusion matrix is not square"));
        }
        let confusion = Array2::from_shape_vec((k, k), rows.concat()).expect("square");
        Ok(EvalReport {
            accuracy: accuracy.ok_or_else(|| bad("missing accuracy line"))?,
            confusion,
        })
    }
}

pub fn predict(net: &ClassifierNet, data: &SequenceSet) -> Result<Vec<usize>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let p = net.probabilities(&data.batch(chunk))?;
        out.extend(p.rows().into_iter().map(|r| argmax(r.view())));
    }
    Ok(out)
}

pub fn evaluate(net: &ClassifierNet, test: &SequenceSet) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    test.validate()?;
    EvalReport::from_predictions(&predict(net, test)?, &test.labels, net.classes())
}
