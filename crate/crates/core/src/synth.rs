//! Synthetic stand-ins for the external datasets: a scalp montage, a
//! stimulus-locked EEG recording whose classes differ by the direction of a
//! traveling wave, and a small labelled image set of oriented gratings.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::formats::pnm::{self, RgbImage};
use crate::ingest::{Electrode, Montage, RawRecording};
use crate::jointtrain::ImageSet;

/// Electrodes on a Fibonacci spiral over the upper hemisphere; electrode 0
/// sits closest to the vertex.
pub fn synth_montage(n: usize) -> Result<Montage> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let electrodes = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64 * 0.95;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Electrode {
                name: format!("E{:02}", i + 1),
                pos: [r * phi.cos(), r * phi.sin(), z],
            }
        })
        .collect();
    Montage::new(electrodes)
}

/// 1/f noise from white Gaussian noise via Kellet's three-pole filter,
/// normalised to unit standard deviation.
pub fn pink_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n + 256)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .skip(256)
        .collect();
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    for v in &mut out {
        *v = (*v - mean) / sd.max(1e-12);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEegConfig {
    pub classes: usize,
    pub trials_per_class: usize,
    pub rate: f64,
    /// Stimulus window the wave covers, in samples, before jitter margins.
    pub window: usize,
    /// Extra wave context on each side of the window.
    pub margin: usize,
    /// Quiet samples between trials.
    pub gap: usize,
    pub amplitude: f64,
    pub noise: f64,
    /// Temporal frequencies of the traveling components, in Hz.
    pub frequencies: Vec<f64>,
    /// Spatial phase change across one unit of scalp coordinate, radians.
    pub wavenumber: f64,
    pub seed: u64,
}

impl Default for SynthEegConfig {
    fn default() -> Self {
        SynthEegConfig {
            classes: 12,
            trials_per_class: 1,
            rate: 128.0,
            window: 130,
            margin: 13,
            gap: 64,
            amplitude: 1.0,
            noise: 0.5,
            frequencies: vec![2.0, 5.0],
            wavenumber: PI,
            seed: 0,
        }
    }
}

/// Direction of travel of class `k` among `classes`.
pub fn class_direction(k: usize, classes: usize) -> f64 {
    TAU * k as f64 / classes as f64
}

/// A recording with one stimulus event per trial, codes `1..=classes`
/// mapping to class `code - 1`, trials in shuffled order.
pub fn synth_recording(montage: &Montage, cfg: &SynthEegConfig) -> Result<RawRecording> {
    if cfg.classes == 0 || cfg.window < 2 || !(cfg.rate > 0.0) {
        return Err(Error::invalid(format!("invalid synthetic EEG config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.classes)
        .flat_map(|k| std::iter::repeat_n(k, cfg.trials_per_class))
        .collect();
    order.shuffle(&mut rng);
    let active = cfg.window + 2 * cfg.margin;
    let lead = cfg.gap.max(cfg.margin);
    let total = lead + order.len() * (active + cfg.gap);
    let c = montage.len();

    let mut data = Array2::zeros((c, total));
    for ch in 0..c {
        let noise = pink_noise(total, &mut rng);
        for (t, v) in noise.into_iter().enumerate() {
            data[[ch, t]] = cfg.noise * v;
        }
    }
    let mut stim = vec![0i64; total];
    let pos: Vec<[f64; 3]> = montage.positions().collect();
    for (trial, &k) in order.iter().enumerate() {
        let start = lead + trial * (active + cfg.gap);
        stim[start + cfg.margin] = k as i64 + 1;
        let theta = class_direction(k, cfg.classes);
        let (ux, uy) = (theta.cos(), theta.sin());
        let phases: Vec<f64> = cfg.frequencies.iter().map(|_| rng.random_range(0.0..TAU)).collect();
        for (ch, p) in pos.iter().enumerate() {
            let spatial = cfg.wavenumber * (p[0] * ux + p[1] * uy);
            for i in 0..active {
                let t = i as f64 / cfg.rate;
                // Hann taper so the wave switches on and off smoothly
                let taper = 0.5 - 0.5 * (TAU * (i as f64 + 0.5) / active as f64).cos();
                let taper = taper.sqrt();
                let s: f64 = cfg
                    .frequencies
                    .iter()
                    .zip(&phases)
                    .map(|(f, ph)| (TAU * f * t - spatial + ph).sin())
                    .sum();
                data[[ch, start + i]] += cfg.amplitude * taper * s;
            }
        }
    }
    RawRecording::new(data, cfg.rate, stim, "synthetic")
}

/// Oriented sinusoidal gratings: class `k` has orientation `k·π/classes`,
/// with random spatial frequency, phase, tint and pixel noise.
pub fn proxy_images(classes: usize, per_class: usize, size: usize, seed: u64) -> Vec<(RgbImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let k = i % classes;
        let theta = PI * k as f64 / classes as f64 + rng.random_range(-0.05..0.05);
        let freq = rng.random_range(2.0..4.0) / size as f64;
        let phase = rng.random_range(0.0..TAU);
        let tint: [f64; 3] = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
        let mut img = RgbImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                let g = 0.5 + 0.5 * (TAU * freq * u + phase).sin();
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let v = g * tint[c] + rng.random_range(-0.08..0.08);
                    *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.set(x, y, px);
            }
        }
        out.push((img, k));
    }
    out
}

/// Writes images as `img_NNNN.ppm` plus `labels.csv` (`file,label`).
pub fn write_image_dir(dir: &Path, images: &[(RgbImage, usize)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("file,label\n");
    for (i, (img, k)) in images.iter().enumerate() {
        let name = format!("img_{i:04}.ppm");
        img.save(&dir.join(&name))?;
        labels.push_str(&format!("{name},{k}\n"));
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Reads a `labels.csv` image directory, resizing every image to
/// `size × size` and scaling samples to `[0, 1]`.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<ImageSet> {
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&labels_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&labels_path, io),
            other => Error::malformed("image labels", format!("{other:?}")),
        })?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::malformed("image labels", e.to_string()))?;
        let (Some(file), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(Error::malformed("image labels", "expected file,label"));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::malformed("image labels", format!("bad label {label:?}")))?;
        entries.push((file.to_string(), label));
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!("{} lists no images", labels_path.display())));
    }
    let loaded = entries
        .iter()
        .map(|(file, label)| Ok((pnm::load(&dir.join(file))?.into_rgb(), *label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(image_set(&loaded, size))
}

/// Stacks labelled images into an `ImageSet`, nearest-neighbour resized to
/// `size × size` with samples scaled to `[0, 1]`.
pub fn image_set(images: &[(RgbImage, usize)], size: usize) -> ImageSet {
    let mut stack = Array4::zeros((images.len(), 3, size, size));
    for (i, (img, _)) in images.iter().enumerate() {
        let img = img.resize_nearest(size, size);
        for y in 0..size {
            for x in 0..size {
                let px = img.get(x, y);
                for c in 0..3 {
                    stack[[i, c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }
    }
    let labels: Vec<usize> = images.iter().map(|(_, k)| *k).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    ImageSet { images: stack, labels, classes }
}

/// Unlabelled second-domain frames, `n × channels × size × size`. All but
/// the last channel carry gratings drawn like [`proxy_images`] (one of
/// `classes` orientations, random gain per channel); the last channel is a
/// domain-specific nuisance: a constant level with noise.
pub fn flow_frames(n: usize, classes: usize, channels: usize, size: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = classes.max(1);
    let content = if channels > 1 { channels - 1 } else { channels };
    let mut out = Array4::zeros((n, channels, size, size));
    for i in 0..n {
        let k = rng.random_range(0..classes);
        let theta = PI * k as f64 / classes as f64 + rng.random_range(-0.05..0.05);
        let freq = rng.random_range(2.0..4.0) / size as f64;
        let phase = rng.random_range(0.0..TAU);
        let gains: Vec<f64> = (0..content).map(|_| rng.random_range(0.6..1.0)).collect();
        let level = rng.random_range(0.8..1.2);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                let g = 0.5 + 0.5 * (TAU * freq * u + phase).sin();
                for (c, gain) in gains.iter().enumerate() {
                    out[[i, c, y, x]] = (g * gain + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
                }
                for c in content..channels {
                    out[[i, c, y, x]] = level + rng.random_range(-0.08..0.08);
                }
            }
        }
    }
    out
}

/// Labelled grating images and unlabelled flow frames of the same spatial
/// size: the two domains of the adversarial transfer setting.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoDomainTask {
    pub images: ImageSet,
    pub flows: Array4<f64>,
}

/// Builds both domains from one seed.
pub fn two_domain_task(classes: usize, per_class: usize, flows: usize, flow_channels: usize, size: usize, seed: u64) -> TwoDomainTask {
    TwoDomainTask {
        images: image_set(&proxy_images(classes, per_class, size, seed), size),
        flows: flow_frames(flows, classes, flow_channels, size, seed ^ 0xf10),
    }
}

/// A complete synthetic input set: montage, recording and proxy images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub electrodes: usize,
    pub eeg: SynthEegConfig,
    pub image_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
}

impl Default for SynthDataset {
    fn default() -> Self {
        SynthDataset {
            electrodes: 32,
            eeg: SynthEegConfig {
                trials_per_class: 8,
                ..SynthEegConfig::default()
            },
            image_classes: 10,
            images_per_class: 20,
            image_size: 32,
        }
    }
}

/// Writes `montage.csv`, `recording.csv`, `images/` and a `config.txt`
/// pointing at them, returning the config path.
pub fn write_synth_dataset(dir: &Path, ds: &SynthDataset) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let montage = synth_montage(ds.electrodes)?;
    let rec = synth_recording(&montage, &ds.eeg)?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e)).map(|_| path)
    };
    write("montage.csv", montage.to_csv())?;
    write("recording.csv", rec.to_csv(&montage))?;
    let images = proxy_images(ds.image_classes, ds.images_per_class, ds.image_size, ds.eeg.seed ^ 0x5eed);
    write_image_dir(&dir.join("images"), &images)?;
    write(
        "config.txt",
        format!(
            "montage = montage.csv\nrecording = recording.csv\nimages = images\nout = out\nseed = {}\n",
            ds.eeg.seed
        ),
    )
}
