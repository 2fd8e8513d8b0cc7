//! Zero-phase Butterworth band-pass filtering into the five EEG rhythms.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::ingest::Epoch;

/// Prototype order of every band-pass filter.
pub const FILTER_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BandName {
    Alpha,
    Beta,
    Gamma,
    Delta,
    Theta,
}

impl BandName {
    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
            BandName::Delta => "delta",
            BandName::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub name: BandName,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn validate(&self, rate: f64) -> Result<()> {
        let nyquist = rate / 2.0;
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi < nyquist) {
            return Err(Error::invalid(format!(
                "{} band ({}, {}) Hz is not inside (0, {nyquist}) Hz",
                self.name.as_str(),
                self.lo,
                self.hi
            )));
        }
        Ok(())
    }
}

/// The five rhythm bands, always in the order alpha, beta, gamma, delta,
/// theta.
pub fn standard_bands() -> [Band; 5] {
    [
        Band { name: BandName::Alpha, lo: 8.0, hi: 13.0 },
        Band { name: BandName::Beta, lo: 14.0, hi: 30.0 },
        Band { name: BandName::Gamma, lo: 31.0, hi: 51.0 },
        Band { name: BandName::Delta, lo: 0.5, hi: 3.0 },
        Band { name: BandName::Theta, lo: 4.0, hi: 7.0 },
    ]
}

/// One second-order section, `b0 + b1 z^-1 + b2 z^-2` over
/// `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z1 * self.a[0] + z2 * self.a[1];
        num / den
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    /// Largest pole radius, used to size edge padding.
    pub pole_radius: f64,
}

impl Sos {
    /// Complex frequency response at normalized angular frequency `w`
    /// (radians/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// Causal filtering with zero initial state.
    pub fn filter_in_place(&self, x: &mut [f64]) {
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * y + z2;
                z2 = s.b[2] * input - s.a[1] * y;
                *v = y;
            }
        }
    }

    /// Samples for the slowest pole to decay by 1e-4, i.e. the settling
    /// length of the cascade.
    pub fn settling_len(&self) -> usize {
        if self.pole_radius <= 0.0 {
            return 1;
        }
        ((1e-4f64).ln() / self.pole_radius.ln()).ceil().max(1.0) as usize
    }

    /// Forward-backward filtering with odd reflection padding of one
    /// settling length (capped by the signal length).
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.settling_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Designs the digital Butterworth band-pass of prototype order `order`
/// via the analog band-pass transform and the bilinear map. The result has
/// `order` sections and unit gain at the geometric center frequency.
pub fn design_bandpass(order: usize, lo: f64, hi: f64, rate: f64) -> Sos {
    let fs2 = 2.0 * rate;
    let w1 = fs2 * (PI * lo / rate).tan();
    let w2 = fs2 * (PI * hi / rate).tan();
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;

    let mut sections = Vec::with_capacity(order);
    let mut pole_radius: f64 = 0.0;
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        for s in [half + root, half - root] {
            // one section per conjugate pair; keep the upper-half-plane member
            if s.im <= 0.0 {
                continue;
            }
            let z = (fs2 + s) / (fs2 - s);
            pole_radius = pole_radius.max(z.norm());
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * z.re, z.norm_sqr()],
            });
        }
    }

    let mut sos = Sos { sections, pole_radius };
    let wc = 2.0 * (w0 / fs2).atan();
    let gain = sos.response(wc).norm();
    let per_section = gain.powf(-1.0 / sos.sections.len() as f64);
    for s in &mut sos.sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    sos
}

/// Zero-phase band-pass of every channel of `epoch`.
pub fn bandpass(epoch: &Epoch, band: &Band, rate: f64) -> Result<Array2<f64>> {
    bandpass_matrix(&epoch.data, band, rate)
}

pub fn bandpass_matrix(data: &Array2<f64>, band: &Band, rate: f64) -> Result<Array2<f64>> {
    band.validate(rate)?;
    let sos = design_bandpass(FILTER_ORDER, band.lo, band.hi, rate);
    let mut out = Array2::zeros(data.raw_dim());
    for (src, mut dst) in data.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let row: Vec<f64> = src.iter().copied().collect();
        for (d, v) in dst.iter_mut().zip(sos.filtfilt(&row)) {
            *d = v;
        }
    }
    Ok(out)
}

/// Five band-filtered copies of an epoch, in [`standard_bands`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBands {
    pub bands: Vec<Array2<f64>>,
    pub label: usize,
    pub onset_sample: usize,
}

impl EpochBands {
    pub fn len(&self) -> usize {
        self.bands.first().map_or(0, |b| b.ncols())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Crops every band to `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> EpochBands {
        EpochBands {
            bands: self
                .bands
                .iter()
                .map(|b| b.slice(ndarray::s![.., start..start + len]).to_owned())
                .collect(),
            label: self.label,
            onset_sample: self.onset_sample + start,
        }
    }
}

pub fn rhythm_stack(epoch: &Epoch, rate: f64) -> Result<EpochBands> {
    let bands = standard_bands()
        .iter()
        .map(|b| bandpass(epoch, b, rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpochBands {
        bands,
        label: epoch.label,
        onset_sample: epoch.onset_sample,
    })
}
