//! Recording and montage loading, stimulus-locked epoching and jitter
//! resampling.
//!
//! Recordings are CSV files with a `time,<ch1>,...,<chC>,stim` header and
//! one row per sample. Montages are CSV rows `name,x,y,z` on the unit
//! sphere, with an optional `name,x,y,z` header line.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub name: String,
    pub pos: [f64; 3],
}

/// Electrode positions on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    electrodes: Vec<Electrode>,
}

impl Montage {
    pub fn new(electrodes: Vec<Electrode>) -> Result<Self> {
        if electrodes.len() < 4 {
            return Err(Error::invalid(format!(
                "montage needs at least 4 electrodes, got {}",
                electrodes.len()
            )));
        }
        let mut seen = HashSet::new();
        for e in &electrodes {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::invalid(format!("duplicate electrode name {:?}", e.name)));
            }
            let norm = e.pos.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::invalid(format!(
                    "electrode {:?} is not on the unit sphere (norm {norm})",
                    e.name
                )));
            }
        }
        Ok(Montage { electrodes })
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.electrodes.iter().map(|e| e.pos)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.name == name)
    }

    /// Renders the montage in the CSV format accepted by [`parse_montage`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,x,y,z\n");
        for e in &self.electrodes {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", e.name, e.pos[0], e.pos[1], e.pos[2]));
        }
        out
    }
}

pub fn parse_montage(text: &str) -> Result<Montage> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut electrodes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed("montage", e.to_string()))?;
        if rec.len() != 4 {
            return Err(Error::malformed(
                "montage",
                format!("row {}: expected 4 fields, got {}", i + 1, rec.len()),
            ));
        }
        if i == 0 && rec[0].eq_ignore_ascii_case("name") && rec[1].eq_ignore_ascii_case("x") {
            continue;
        }
        let mut pos = [0.0; 3];
        for (k, p) in pos.iter_mut().enumerate() {
            *p = rec[k + 1].parse().map_err(|_| {
                Error::malformed("montage", format!("row {}: bad coordinate {:?}", i + 1, &rec[k + 1]))
            })?;
        }
        electrodes.push(Electrode {
            name: rec[0].to_string(),
            pos,
        });
    }
    Montage::new(electrodes)
}

pub fn load_montage(path: impl AsRef<Path>) -> Result<Montage> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_montage(&text)
}

/// Multichannel sampled EEG with its stimulus channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    /// channels × samples, microvolts, rows in montage order.
    pub data: Array2<f64>,
    pub rate: f64,
    pub stim: Vec<i64>,
    pub montage_ref: String,
}

impl RawRecording {
    pub fn new(data: Array2<f64>, rate: f64, stim: Vec<i64>, montage_ref: impl Into<String>) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {rate}")));
        }
        if stim.len() != data.ncols() {
            return Err(Error::invalid(format!(
                "stim length {} differs from sample count {}",
                stim.len(),
                data.ncols()
            )));
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(RawRecording {
            data,
            rate,
            stim,
            montage_ref: montage_ref.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    /// Sample indices where the stimulus channel steps to a new nonzero code.
    pub fn events(&self) -> Vec<(usize, i64)> {
        let mut prev = 0;
        let mut out = Vec::new();
        for (i, &code) in self.stim.iter().enumerate() {
            if code != 0 && code != prev {
                out.push((i, code));
            }
            prev = code;
        }
        out
    }

    /// Renders the recording in the CSV format accepted by [`parse_recording`].
    pub fn to_csv(&self, montage: &Montage) -> String {
        let mut out = String::from("time");
        for e in montage.electrodes() {
            out.push(',');
            out.push_str(&e.name);
        }
        out.push_str(",stim\n");
        for t in 0..self.samples() {
            out.push_str(&format!("{:?}", t as f64 / self.rate));
            for c in 0..self.channels() {
                out.push_str(&format!(",{:?}", self.data[[c, t]]));
            }
            out.push_str(&format!(",{}\n", self.stim[t]));
        }
        out
    }
}

/// Parses a recording CSV against `montage`.
///
/// The sampling rate is inferred from the time column unless `rate` is
/// given; recordings with fewer than two rows need an explicit rate.
pub fn parse_recording(text: &str, montage: &Montage, rate: Option<f64>) -> Result<RawRecording> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::malformed("recording", e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "time" || &header[header.len() - 1] != "stim" {
        return Err(Error::malformed(
            "recording",
            "header must be `time,<channels...>,stim`",
        ));
    }
    let found = header.len() - 2;
    if found != montage.len() {
        return Err(Error::ChannelMismatch {
            expected: montage.len(),
            found,
        });
    }
    // column k of the file holds montage row order[k]
    let mut order = Vec::with_capacity(found);
    let mut used = vec![false; found];
    for name in header.iter().skip(1).take(found) {
        let idx = montage
            .index_of(name)
            .ok_or_else(|| Error::malformed("recording", format!("channel {name:?} not in montage")))?;
        if used[idx] {
            return Err(Error::malformed("recording", format!("duplicate channel {name:?}")));
        }
        used[idx] = true;
        order.push(idx);
    }

    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); found];
    let mut stim = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed("recording", e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::malformed(
                "recording",
                format!("row {}: expected {} fields, got {}", row + 1, header.len(), rec.len()),
            ));
        }
        let num = |col: usize| -> Result<f64> {
            rec[col]
                .parse::<f64>()
                .map_err(|_| Error::malformed("recording", format!("row {}: bad number {:?}", row + 1, &rec[col])))
        };
        let t = num(0)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { row, col: 0 });
        }
        times.push(t);
        for (k, &dst) in order.iter().enumerate() {
            let v = num(k + 1)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: k + 1 });
            }
            columns[dst].push(v);
        }
        let code = rec[header.len() - 1]
            .parse::<i64>()
            .map_err(|_| Error::malformed("recording", format!("row {}: bad stim code", row + 1)))?;
        stim.push(code);
    }

    let rate = match rate {
        Some(r) => r,
        None => {
            if times.len() < 2 {
                return Err(Error::invalid(
                    "cannot infer sampling rate from fewer than two samples; set `rate`",
                ));
            }
            let span = times[times.len() - 1] - times[0];
            if !(span > 0.0) {
                return Err(Error::malformed("recording", "time column must increase"));
            }
            (times.len() - 1) as f64 / span
        }
    };

    let samples = stim.len();
    let mut data = Array2::zeros((found, samples));
    for (c, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            data[[c, t]] = v;
        }
    }
    RawRecording::new(data, rate, stim, "montage")
}

pub fn load_recording(path: impl AsRef<Path>, montage: &Montage, rate: Option<f64>) -> Result<RawRecording> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rec = parse_recording(&text, montage, rate)?;
    rec.montage_ref = path.display().to_string();
    Ok(rec)
}

/// One stimulus-locked window. `onset_sample` is the recording index of
/// column 0 of `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub data: Array2<f64>,
    pub label: usize,
    pub onset_sample: usize,
}

impl Epoch {
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }
}

/// Mapping from stimulus code to class id. Codes absent from the map are
/// ignored.
pub type EventMap = BTreeMap<i64, usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroppedEvent {
    pub sample: usize,
    pub code: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub epochs: Vec<Epoch>,
    /// Mapped events whose window overruns the recording.
    pub dropped: Vec<DroppedEvent>,
    /// Nonzero events whose code is not in the event map.
    pub ignored: usize,
}

/// Cuts one length-`window` epoch per mapped event, starting at the event.
pub fn extract_epochs(rec: &RawRecording, window: usize, event_map: &EventMap) -> Result<Extraction> {
    extract_padded_epochs(rec, window, 0, event_map)
}

/// Like [`extract_epochs`] but each epoch carries `pad` extra samples of
/// context on both sides (length `window + 2 * pad`, starting at
/// `event - pad`), ready for [`resample_epochs`] with jitter `pad`.
pub fn extract_padded_epochs(
    rec: &RawRecording,
    window: usize,
    pad: usize,
    event_map: &EventMap,
) -> Result<Extraction> {
    if window < 2 {
        return Err(Error::invalid(format!("epoch window must be at least 2 samples, got {window}")));
    }
    let total = window + 2 * pad;
    let mut out = Extraction::default();
    for (sample, code) in rec.events() {
        let Some(&label) = event_map.get(&code) else {
            out.ignored += 1;
            continue;
        };
        let fits = sample >= pad && sample - pad + total <= rec.samples();
        if !fits {
            out.dropped.push(DroppedEvent { sample, code });
            continue;
        }
        let start = sample - pad;
        out.epochs.push(Epoch {
            data: rec.data.slice(s![.., start..start + total]).to_owned(),
            label,
            onset_sample: start,
        });
    }
    Ok(out)
}

/// Offsets in `[-jitter, +jitter]` for `count` copies of each of
/// `sources` epochs, source-major. This is the random stream behind
/// [`resample_epochs`], exposed so derived data (e.g. filtered bands) can
/// be cropped identically.
pub fn jitter_offsets(sources: usize, count: usize, jitter: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = jitter as i64;
    (0..sources * count)
        .map(|_| if jitter == 0 { 0 } else { rng.random_range(-j..=j) })
        .collect()
}

/// Draws `count` jittered length-`L` windows from each pre-padded epoch,
/// where `L = len - 2 * jitter`. Output is source-major and fully
/// determined by `seed`.
pub fn resample_epochs(epochs: &[Epoch], count: usize, jitter: usize, seed: u64) -> Result<Vec<Epoch>> {
    if count == 0 {
        return Err(Error::invalid("resample count must be at least 1"));
    }
    if let Some(ep) = epochs.iter().find(|ep| ep.len() < 2 * jitter + 2) {
        return Err(Error::invalid(format!(
            "jitter {jitter} too large for padded epoch of length {}",
            ep.len()
        )));
    }
    let offsets = jitter_offsets(epochs.len(), count, jitter, seed);
    let mut out = Vec::with_capacity(offsets.len());
    for (i, &offset) in offsets.iter().enumerate() {
        let ep = &epochs[i / count];
        let window = ep.len() - 2 * jitter;
        let start = (jitter as i64 + offset) as usize;
        out.push(Epoch {
            data: ep.data.slice(s![.., start..start + window]).to_owned(),
            label: ep.label,
            onset_sample: ep.onset_sample + start,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn ring_montage(n: usize) -> Montage {
        let electrodes = (0..n)
            .map(|i| {
                let az = i as f64 / n as f64 * std::f64::consts::TAU;
                let colat = 0.3 + 0.9 * (i % 3) as f64 / 3.0;
                Electrode {
                    name: format!("E{i}"),
                    pos: [colat.sin() * az.cos(), colat.sin() * az.sin(), colat.cos()],
                }
            })
            .collect();
        Montage::new(electrodes).unwrap()
    }

    fn recording_with_events(samples: usize, events: &[(usize, i64)]) -> RawRecording {
        let data = Array2::from_shape_fn((4, samples), |(c, t)| (c * 1000 + t) as f64);
        let mut stim = vec![0; samples];
        for &(s, code) in events {
            stim[s] = code;
        }
        RawRecording::new(data, 256.0, stim, "test").unwrap()
    }

    #[test]
    fn montage_rejects_off_sphere_and_duplicates() {
        let text = "name,x,y,z\nA,1,0,0\nB,0,1,0\nC,0,0,1\nD,0,0,1.1\n";
        assert!(parse_montage(text).is_err());
        let text = "A,1,0,0\nA,0,1,0\nC,0,0,1\nD,0,0,-1\n";
        assert!(parse_montage(text).is_err());
        let text = "A,1,0,0\nB,0,1,0\nC,0,0,1\n";
        assert!(parse_montage(text).is_err());
        let m = parse_montage("A,1,0,0\nB,0,1,0\nC,0,0,1\nD,0,0,-1\n").unwrap();
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn recording_roundtrip_and_reorder() {
        let m = ring_montage(4);
        let rec = recording_with_events(10, &[(3, 7)]);
        let parsed = parse_recording(&rec.to_csv(&m), &m, None).unwrap();
        assert_eq!(parsed.data, rec.data);
        assert!((parsed.rate - 256.0).abs() < 1e-9);
        assert_eq!(parsed.stim, rec.stim);

        // columns in a different order land in montage order
        let text = "time,E1,E0,E2,E3,stim\n0,1,0,2,3,0\n0.5,11,10,12,13,1\n";
        let parsed = parse_recording(text, &m, None).unwrap();
        assert_eq!(parsed.data.column(1).to_vec(), vec![10.0, 11.0, 12.0, 13.0]);
        assert!((parsed.rate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sixty_four_channels_load() {
        let m = ring_montage(64);
        let data = Array2::from_elem((64, 5), 1.5);
        let rec = RawRecording::new(data, 128.0, vec![0; 5], "x").unwrap();
        let parsed = parse_recording(&rec.to_csv(&m), &m, None).unwrap();
        assert_eq!(parsed.channels(), 64);
    }

    #[test]
    fn channel_count_mismatch() {
        let m = ring_montage(64);
        let m63 = ring_montage(63);
        let data = Array2::from_elem((63, 3), 0.0);
        let rec = RawRecording::new(data, 128.0, vec![0; 3], "x").unwrap();
        let err = parse_recording(&rec.to_csv(&m63), &m, None).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { expected: 64, found: 63 }));
    }

    #[test]
    fn nan_sample_rejected() {
        let m = ring_montage(4);
        let text = "time,E0,E1,E2,E3,stim\n0,1,2,3,4,0\n0.1,1,NaN,3,4,0\n";
        let err = parse_recording(text, &m, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 2 }));
    }

    #[test]
    fn empty_recording_needs_rate() {
        let m = ring_montage(4);
        let text = "time,E0,E1,E2,E3,stim\n";
        assert!(parse_recording(text, &m, None).is_err());
        let rec = parse_recording(text, &m, Some(128.0)).unwrap();
        assert_eq!(rec.samples(), 0);
    }

    #[test]
    fn epochs_at_event_onsets() {
        let rec = recording_with_events(1000, &[(100, 1), (500, 2)]);
        let map = EventMap::from([(1, 0), (2, 1)]);
        let ex = extract_epochs(&rec, 256, &map).unwrap();
        let onsets: Vec<_> = ex.epochs.iter().map(|e| e.onset_sample).collect();
        assert_eq!(onsets, vec![100, 500]);
        assert_eq!(ex.epochs[1].label, 1);
        assert_eq!(ex.epochs[0].data[[2, 0]], 2100.0);
        assert!(ex.dropped.is_empty());
    }

    #[test]
    fn overrunning_event_dropped() {
        let rec = recording_with_events(1000, &[(900, 1)]);
        let ex = extract_epochs(&rec, 256, &EventMap::from([(1, 0)])).unwrap();
        assert!(ex.epochs.is_empty());
        assert_eq!(ex.dropped, vec![DroppedEvent { sample: 900, code: 1 }]);
    }

    #[test]
    fn no_events_no_epochs() {
        let rec = recording_with_events(1000, &[]);
        let ex = extract_epochs(&rec, 256, &EventMap::from([(1, 0)])).unwrap();
        assert!(ex.epochs.is_empty() && ex.dropped.is_empty());
    }

    #[test]
    fn resample_counts_and_identity() {
        let rec = recording_with_events(2000, &(0..12).map(|i| (50 + i * 150, 1 + (i % 3) as i64)).collect::<Vec<_>>());
        let map = EventMap::from([(1, 0), (2, 1), (3, 2)]);
        let ex = extract_padded_epochs(&rec, 64, 8, &map).unwrap();
        assert_eq!(ex.epochs.len(), 12);
        let out = resample_epochs(&ex.epochs, 50, 8, 1).unwrap();
        assert_eq!(out.len(), 600);
        assert!(out.iter().all(|e| e.len() == 64));

        let plain = extract_epochs(&rec, 64, &map).unwrap();
        let copies = resample_epochs(&plain.epochs, 1, 0, 99).unwrap();
        assert_eq!(copies, plain.epochs);
    }

    #[test]
    fn resample_deterministic_and_bounded() {
        let rec = recording_with_events(600, &[(100, 1), (300, 1)]);
        let ex = extract_padded_epochs(&rec, 32, 5, &EventMap::from([(1, 0)])).unwrap();
        let a = resample_epochs(&ex.epochs, 20, 5, 3).unwrap();
        let b = resample_epochs(&ex.epochs, 20, 5, 3).unwrap();
        assert_eq!(a, b);
        for (i, e) in a.iter().enumerate() {
            let event = if i < 20 { 100 } else { 300 };
            let offset = e.onset_sample as i64 - event;
            assert!((-5..=5).contains(&offset));
            // content is the recording at the jittered onset
            assert_eq!(e.data[[0, 0]], e.onset_sample as f64);
        }
    }

    #[test]
    fn resample_rejects_excess_jitter() {
        let rec = recording_with_events(600, &[(100, 1)]);
        let ex = extract_epochs(&rec, 10, &EventMap::from([(1, 0)])).unwrap();
        assert!(resample_epochs(&ex.epochs, 2, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn extraction_is_exhaustive(
            onsets in proptest::collection::btree_set(1usize..990, 0..20),
            window in 2usize..300,
        ) {
            // space events so each is a distinct step
            let events: Vec<_> = onsets.iter().map(|&s| (s, if s % 2 == 0 { 1 } else { 2 })).collect();
            let mut stim = vec![0; 1000];
            for &(s, c) in &events { stim[s] = c; }
            let rec = RawRecording::new(Array2::zeros((4, 1000)), 100.0, stim, "p").unwrap();
            let mapped = rec.events().len();
            let ex = extract_epochs(&rec, window, &EventMap::from([(1, 0), (2, 1)])).unwrap();
            prop_assert_eq!(ex.epochs.len() + ex.dropped.len(), mapped);
        }

        #[test]
        fn resample_scales_label_histogram(labels in proptest::collection::vec(0usize..4, 1..10), count in 1usize..6, seed in any::<u64>()) {
            let epochs: Vec<_> = labels.iter().map(|&l| Epoch {
                data: Array2::zeros((2, 20)),
                label: l,
                onset_sample: 0,
            }).collect();
            let out = resample_epochs(&epochs, count, 3, seed).unwrap();
            for k in 0..4 {
                let before = labels.iter().filter(|&&l| l == k).count();
                let after = out.iter().filter(|e| e.label == k).count();
                prop_assert_eq!(after, before * count);
            }
        }
    }
}
