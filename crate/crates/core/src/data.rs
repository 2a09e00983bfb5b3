//! Recordings, frequency bands, trial-wise splitting and a synthetic
//! EEG-like generator whose classes differ only in band power.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LelError, Result};
use crate::fft;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: BandName,
    pub low: f64,
    pub high: f64,
}

impl BandSpec {
    pub const fn new(name: BandName, low: f64, high: f64) -> Self {
        Self { name, low, high }
    }
}

/// Delta 1–4, Theta 4–8, Alpha 8–13, Beta 13–30, Gamma 30–50 Hz.
pub const DEFAULT_BANDS: [BandSpec; 5] = [
    BandSpec::new(BandName::Delta, 1.0, 4.0),
    BandSpec::new(BandName::Theta, 4.0, 8.0),
    BandSpec::new(BandName::Alpha, 8.0, 13.0),
    BandSpec::new(BandName::Beta, 13.0, 30.0),
    BandSpec::new(BandName::Gamma, 30.0, 50.0),
];

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Half-open bin range `[lo, hi)` of `band` for a length-`n_samples`
/// transform at `sampling_rate`: `lo = ceil(low·T/fs)`, `hi = floor(high·T/fs)`.
pub fn make_band_bins(band: &BandSpec, n_samples: usize, sampling_rate: f64) -> Result<(usize, usize)> {
    let invalid = |reason: String| LelError::InvalidBand {
        name: band.name.to_string(),
        reason,
    };
    if n_samples < 2 {
        return Err(invalid(format!("need at least 2 samples, got {n_samples}")));
    }
    if !(sampling_rate > 0.0) {
        return Err(invalid(format!("sampling rate must be positive, got {sampling_rate}")));
    }
    if !(band.low >= 0.0 && band.low < band.high && band.high <= sampling_rate / 2.0) {
        return Err(invalid(format!(
            "need 0 <= low < high <= fs/2 = {}, got [{}, {}]",
            sampling_rate / 2.0,
            band.low,
            band.high
        )));
    }
    let t = n_samples as f64;
    let lo = snap(band.low * t / sampling_rate).ceil() as usize;
    let hi = snap(band.high * t / sampling_rate).floor() as usize;
    if lo >= hi {
        return Err(LelError::BandTooNarrow {
            name: band.name.to_string(),
            low: lo,
            high: hi,
            n_samples,
            sampling_rate,
        });
    }
    Ok((lo, hi))
}

/// Bin ranges for a list of bands, rejecting overlaps.
pub fn band_bins(bands: &[BandSpec], n_samples: usize, sampling_rate: f64) -> Result<Vec<(usize, usize)>> {
    let bins = bands
        .iter()
        .map(|b| make_band_bins(b, n_samples, sampling_rate))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in bins.iter().enumerate() {
        for b in &bins[i + 1..] {
            if a.0 < b.1 && b.0 < a.1 {
                return Err(LelError::Contract(format!("overlapping band bins {a:?} and {b:?}")));
            }
        }
    }
    Ok(bins)
}

/// One labeled multichannel window `[C × T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub samples: Array2<f64>,
    pub sampling_rate: f64,
    pub subject_id: String,
    pub trial_id: String,
    pub label: usize,
}

impl Recording {
    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject_id.clone(),
            trial: self.trial_id.clone(),
        }
    }
}

/// Labeled windows from one or more subjects. Several windows may share a
/// trial id; the trial is the unit of splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub recordings: Vec<Recording>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B × C × T]`
    pub data: Array3<f64>,
    pub labels: Vec<usize>,
}

impl TrialSet {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .recordings
            .first()
            .ok_or_else(|| LelError::InvalidSpec("empty trial set".into()))?;
        if self.n_classes == 0 {
            return Err(LelError::InvalidSpec("class count must be >= 1".into()));
        }
        let (c, t, fs) = (first.n_channels(), first.n_samples(), first.sampling_rate);
        if c < 1 || t < 2 {
            return Err(LelError::Shape(format!(
                "recordings need C >= 1 and T >= 2, got {c}x{t}"
            )));
        }
        for r in &self.recordings {
            if r.n_channels() != c || r.n_samples() != t || r.sampling_rate != fs {
                return Err(LelError::Shape(format!(
                    "recording {}/{} is {}x{} at {} Hz, expected {c}x{t} at {fs} Hz",
                    r.subject_id,
                    r.trial_id,
                    r.n_channels(),
                    r.n_samples(),
                    r.sampling_rate
                )));
            }
            if r.label >= self.n_classes {
                return Err(LelError::Contract(format!(
                    "label {} of {}/{} is outside 0..{}",
                    r.label, r.subject_id, r.trial_id, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.recordings.first().map_or(0, Recording::n_channels)
    }

    pub fn n_samples(&self) -> usize {
        self.recordings.first().map_or(0, Recording::n_samples)
    }

    pub fn sampling_rate(&self) -> f64 {
        self.recordings.first().map_or(0.0, |r| r.sampling_rate)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (c, t) = (self.n_channels(), self.n_samples());
        let mut data = Array3::zeros((indices.len(), c, t));
        let mut labels = Vec::with_capacity(indices.len());
        for (i, &idx) in indices.iter().enumerate() {
            let r = &self.recordings[idx];
            data.slice_mut(s![i, .., ..]).assign(&r.samples);
            labels.push(r.label);
        }
        Batch { data, labels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialKey {
    pub subject: String,
    pub trial: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.60,
            val: 0.10,
            test: 0.30,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r >= 0.0)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(LelError::Split(format!(
                "ratios must be nonnegative and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Disjoint train/val/test trial sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: BTreeSet<TrialKey>,
    pub val: BTreeSet<TrialKey>,
    pub test: BTreeSet<TrialKey>,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl SplitAssignment {
    /// Builds an assignment, rejecting any trial placed in two splits.
    pub fn new(
        train: BTreeSet<TrialKey>,
        val: BTreeSet<TrialKey>,
        test: BTreeSet<TrialKey>,
        ratios: SplitRatios,
        seed: u64,
    ) -> Result<Self> {
        let a = Self {
            train,
            val,
            test,
            ratios,
            seed,
        };
        a.check_disjoint()?;
        Ok(a)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let sets = [
            (SplitName::Train, &self.train),
            (SplitName::Val, &self.val),
            (SplitName::Test, &self.test),
        ];
        for (i, (na, a)) in sets.iter().enumerate() {
            for (nb, b) in &sets[i + 1..] {
                if let Some(k) = a.intersection(b).next() {
                    return Err(LelError::Leakage {
                        trial: format!("{}/{}", k.subject, k.trial),
                        first: na.as_str(),
                        second: nb.as_str(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split_of(&self, key: &TrialKey) -> Option<SplitName> {
        if self.train.contains(key) {
            Some(SplitName::Train)
        } else if self.val.contains(key) {
            Some(SplitName::Val)
        } else if self.test.contains(key) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    /// Recording indices of `set` that belong to `split`.
    pub fn indices(&self, set: &TrialSet, split: SplitName) -> Vec<usize> {
        set.recordings
            .iter()
            .enumerate()
            .filter(|(_, r)| self.split_of(&r.key()) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Verifies that every recording of `set` maps to exactly one split.
    pub fn audit(&self, set: &TrialSet) -> Result<()> {
        self.check_disjoint()?;
        for r in &set.recordings {
            if self.split_of(&r.key()).is_none() {
                return Err(LelError::Split(format!(
                    "trial {}/{} is not assigned to any split",
                    r.subject_id, r.trial_id
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Per-subject, label-stratified, trial-atomic split.
pub fn split_trials(set: &TrialSet, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    // subject -> trial -> label
    let mut subjects: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in &set.recordings {
        let trials = subjects.entry(&r.subject_id).or_default();
        match trials.get(r.trial_id.as_str()) {
            Some(&l) if l != r.label => {
                return Err(LelError::Split(format!(
                    "trial {}/{} carries conflicting labels {l} and {}",
                    r.subject_id, r.trial_id, r.label
                )))
            }
            _ => {
                trials.insert(&r.trial_id, r.label);
            }
        }
    }

    let mut train = BTreeSet::new();
    let mut val = BTreeSet::new();
    let mut test = BTreeSet::new();

    for (s_idx, (subject, trials)) in subjects.iter().enumerate() {
        let n = trials.len();
        if n < set.n_classes {
            let present: BTreeSet<usize> = trials.values().copied().collect();
            return Err(LelError::DeficientClasses {
                subject: subject.to_string(),
                classes: (0..set.n_classes).filter(|c| !present.contains(c)).collect(),
            });
        }
        if n < 10 {
            return Err(LelError::Split(format!(
                "subject '{subject}' has {n} trials; at least 10 are required"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (&t, &l) in trials {
            by_class.entry(l).or_default().push(t);
        }
        for v in by_class.values_mut() {
            v.shuffle(&mut rng);
        }

        let counts: Vec<(usize, usize)> = by_class.iter().map(|(&c, v)| (c, v.len())).collect();
        let alloc = stratified_allocation(&counts, n, &ratios);
        for ((_, list), quota) in by_class.iter().zip(alloc) {
            let mut it = list.iter();
            for (dst, q) in [(&mut train, quota[0]), (&mut val, quota[1]), (&mut test, quota[2])] {
                for t in it.by_ref().take(q) {
                    dst.insert(TrialKey {
                        subject: subject.to_string(),
                        trial: t.to_string(),
                    });
                }
            }
        }
    }
    SplitAssignment::new(train, val, test, ratios, seed)
}

/// Per-class `[train, val, test]` counts whose column sums hit the subject
/// targets `round(0.6 n)`, `round(0.1 n)`, rest.
fn stratified_allocation(counts: &[(usize, usize)], n: usize, ratios: &SplitRatios) -> Vec<[usize; 3]> {
    let r = [ratios.train, ratios.val, ratios.test];
    let t_train = (r[0] * n as f64).round() as usize;
    let t_val = ((r[1] * n as f64).round() as usize).min(n - t_train);
    let targets = [t_train, t_val, n - t_train - t_val];

    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(counts.len());
    let mut fracs = Vec::new();
    for (ci, &(_, nc)) in counts.iter().enumerate() {
        let mut row = [0usize; 3];
        for s in 0..3 {
            let q = nc as f64 * r[s];
            row[s] = q.floor() as usize;
            fracs.push((q - q.floor(), ci, s));
        }
        alloc.push(row);
    }
    let mut class_left: Vec<usize> = counts
        .iter()
        .zip(&alloc)
        .map(|(&(_, nc), row)| nc - row.iter().sum::<usize>())
        .collect();
    let mut split_left: Vec<usize> = (0..3)
        .map(|s| targets[s].saturating_sub(alloc.iter().map(|row| row[s]).sum()))
        .collect();
    // largest remainder first, ties by class then split order
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, ci, s) in &fracs {
        if class_left[ci] > 0 && split_left[s] > 0 {
            alloc[ci][s] += 1;
            class_left[ci] -= 1;
            split_left[s] -= 1;
        }
    }
    for ci in 0..alloc.len() {
        for s in 0..3 {
            while class_left[ci] > 0 && split_left[s] > 0 {
                alloc[ci][s] += 1;
                class_left[ci] -= 1;
                split_left[s] -= 1;
            }
        }
        // targets already met everywhere; leftovers go to train
        alloc[ci][0] += class_left[ci];
        class_left[ci] = 0;
    }
    alloc
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub sampling_rate: f64,
    /// Band power increase of the class signature, in decibels.
    pub boost_db: f64,
    /// Noise power spectrum ∝ 1/f^γ.
    pub noise_exponent: f64,
    pub trials_per_class: usize,
    pub n_subjects: usize,
    /// Windows of length `n_samples` cut from each (longer) trial.
    pub windows_per_trial: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_channels: 8,
            n_samples: 512,
            sampling_rate: 200.0,
            boost_db: 12.0,
            noise_exponent: 1.0,
            trials_per_class: 100,
            n_subjects: 1,
            windows_per_trial: 1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LelError::InvalidSpec(m));
        if self.n_classes < 1 || self.n_channels < 1 {
            return bad("need at least one class and one channel".into());
        }
        if self.n_classes > DEFAULT_BANDS.len() * self.n_channels {
            return bad(format!(
                "class signatures exhausted: K = {} > 5 bands x {} channels",
                self.n_classes, self.n_channels
            ));
        }
        if self.n_samples < 2 {
            return bad("n_samples must be >= 2".into());
        }
        if !(self.boost_db >= 0.0) || !self.boost_db.is_finite() {
            return bad(format!("boost_db must be finite and >= 0, got {}", self.boost_db));
        }
        if !self.noise_exponent.is_finite() {
            return bad("noise_exponent must be finite".into());
        }
        if self.trials_per_class < 1 || self.n_subjects < 1 || self.windows_per_trial < 1 {
            return bad("trials_per_class, n_subjects and windows_per_trial must be >= 1".into());
        }
        let highest = DEFAULT_BANDS.iter().map(|b| b.high).fold(0.0, f64::max);
        if !(self.sampling_rate > 2.0 * highest) {
            return bad(format!(
                "sampling rate {} must exceed twice the highest band edge ({highest} Hz)",
                self.sampling_rate
            ));
        }
        band_bins(&DEFAULT_BANDS, self.n_samples, self.sampling_rate)?;
        Ok(())
    }

    /// Band index and channel list whose power encodes class `k`.
    pub fn signature(&self, k: usize) -> (usize, Vec<usize>) {
        let nb = DEFAULT_BANDS.len();
        let groups = self.n_classes.div_ceil(nb);
        let g = k / nb;
        let lo = g * self.n_channels / groups;
        let hi = (g + 1) * self.n_channels / groups;
        (k % nb, (lo..hi).collect())
    }
}

/// Shaped white noise with power ∝ 1/f^γ and unit expected variance.
fn pink_noise(len: usize, fs: f64, gamma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f = fft::half_len(len);
    let mut spec = vec![Complex64::new(0.0, 0.0); f];
    let mut power = 0.0;
    for (k, c) in spec.iter_mut().enumerate().skip(1) {
        let freq = k as f64 * fs / len as f64;
        let amp = freq.powf(-gamma / 2.0);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        if 2 * k == len {
            *c = Complex64::new(amp * re, 0.0);
            power += amp * amp;
        } else {
            *c = Complex64::new(amp * re, amp * im) / std::f64::consts::SQRT_2;
            power += 2.0 * amp * amp;
        }
    }
    // E[x_t²] = power / len² before scaling
    let scale = len as f64 / power.sqrt();
    fft::irfft(&spec, len).into_iter().map(|v| v * scale).collect()
}

/// Generates a dataset where class `k` adds a bin-aligned sinusoid to the
/// channels of its signature, raising that band's power by `boost_db`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<TrialSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bins = band_bins(&DEFAULT_BANDS, spec.n_samples, spec.sampling_rate)?;
    let t = spec.n_samples;
    let total = t * spec.windows_per_trial;
    let gain = 10f64.powf(spec.boost_db / 10.0) - 1.0;
    let mut recordings = Vec::new();

    for subj in 0..spec.n_subjects {
        let mut trial_idx = 0;
        for label in 0..spec.n_classes {
            let (band, channels) = spec.signature(label);
            let (lo, hi) = bins[band];
            for _ in 0..spec.trials_per_class {
                let mut trial = Array2::zeros((spec.n_channels, total));
                for ch in 0..spec.n_channels {
                    let noise = pink_noise(total, spec.sampling_rate, spec.noise_exponent, &mut rng);
                    trial.row_mut(ch).assign(&ndarray::Array1::from(noise));
                }
                let bin = rng.random_range(lo.max(1)..hi);
                for &ch in &channels {
                    let row = trial.row(ch).to_vec();
                    let band_energy = row
                        .chunks_exact(t)
                        .map(|w| fft::rfft(w)[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>())
                        .sum::<f64>()
                        / spec.windows_per_trial as f64;
                    let amp = 2.0 / t as f64 * (gain * band_energy).sqrt();
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let w = std::f64::consts::TAU * bin as f64 / t as f64;
                    for (i, v) in trial.row_mut(ch).iter_mut().enumerate() {
                        *v += amp * (w * i as f64 + phase).cos();
                    }
                }
                let trial_id = format!("t{trial_idx:04}");
                trial_idx += 1;
                for wi in 0..spec.windows_per_trial {
                    recordings.push(Recording {
                        samples: trial.slice(s![.., wi * t..(wi + 1) * t]).to_owned(),
                        sampling_rate: spec.sampling_rate,
                        subject_id: format!("s{subj:02}"),
                        trial_id: trial_id.clone(),
                        label,
                    });
                }
            }
        }
    }
    Ok(TrialSet {
        recordings,
        n_classes: spec.n_classes,
    })
}

/// Accuracy of a training-free classifier that picks the class whose
/// signature band log-power (averaged over the signature channels) sits
/// furthest above its dataset median.
pub fn band_power_oracle_accuracy(set: &TrialSet, spec: &SynthSpec) -> Result<f64> {
    let bins = band_bins(&DEFAULT_BANDS, set.n_samples(), set.sampling_rate())?;
    let sigs: Vec<(usize, Vec<usize>)> = (0..set.n_classes).map(|k| spec.signature(k)).collect();
    let scores: Vec<Vec<f64>> = set
        .recordings
        .iter()
        .map(|r| {
            let energy: Vec<Vec<f64>> = r
                .samples
                .rows()
                .into_iter()
                .map(|row| {
                    let sp = fft::rfft(&row.to_vec());
                    bins.iter()
                        .map(|&(lo, hi)| sp[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>())
                        .collect()
                })
                .collect();
            sigs.iter()
                .map(|(band, chans)| {
                    chans.iter().map(|&c| energy[c][*band].max(1e-300).ln()).sum::<f64>() / chans.len() as f64
                })
                .collect()
        })
        .collect();
    let medians: Vec<f64> = (0..set.n_classes)
        .map(|k| {
            let mut col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
            col.sort_by(f64::total_cmp);
            col[col.len() / 2]
        })
        .collect();
    let correct = scores
        .iter()
        .zip(&set.recordings)
        .filter(|(s, r)| {
            let pred = (0..set.n_classes)
                .max_by(|&a, &b| (s[a] - medians[a]).total_cmp(&(s[b] - medians[b])))
                .unwrap();
            pred == r.label
        })
        .count();
    Ok(correct as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(per_class: &[usize]) -> TrialSet {
        let mut recordings = Vec::new();
        let mut idx = 0;
        for (label, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                recordings.push(Recording {
                    samples: Array2::zeros((1, 4)),
                    sampling_rate: 200.0,
                    subject_id: "s".into(),
                    trial_id: format!("t{idx}"),
                    label,
                });
                idx += 1;
            }
        }
        TrialSet {
            recordings,
            n_classes: per_class.len(),
        }
    }

    #[test]
    fn alpha_bins_at_point_two_hz_resolution() {
        let alpha = DEFAULT_BANDS[2];
        assert_eq!(make_band_bins(&alpha, 1000, 200.0).unwrap(), (40, 65));
    }

    #[test]
    fn ten_hz_peak_lands_inside_alpha() {
        let (lo, hi) = make_band_bins(&DEFAULT_BANDS[2], 1000, 200.0).unwrap();
        let x: Vec<f64> = (0..1000)
            .map(|t| (std::f64::consts::TAU * 10.0 * t as f64 / 200.0).sin())
            .collect();
        let sp = fft::rfft(&x);
        let peak = (0..sp.len())
            .max_by(|&a, &b| sp[a].norm().total_cmp(&sp[b].norm()))
            .unwrap();
        assert!(lo <= peak && peak < hi, "peak {peak} outside [{lo}, {hi})");
    }

    #[test]
    fn full_half_spectrum_band() {
        let b = BandSpec::new(BandName::Delta, 0.0, 100.0);
        assert_eq!(make_band_bins(&b, 1000, 200.0).unwrap(), (0, 500));
    }

    #[test]
    fn default_bands_match_protocol() {
        let edges: Vec<(f64, f64)> = DEFAULT_BANDS.iter().map(|b| (b.low, b.high)).collect();
        assert_eq!(
            edges,
            vec![(1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0)]
        );
    }

    #[test]
    fn narrow_band_is_rejected() {
        let b = BandSpec::new(BandName::Alpha, 10.0, 10.1);
        assert!(matches!(
            make_band_bins(&b, 100, 200.0),
            Err(LelError::BandTooNarrow { .. })
        ));
        let over = BandSpec::new(BandName::Gamma, 30.0, 120.0);
        assert!(matches!(
            make_band_bins(&over, 100, 200.0),
            Err(LelError::InvalidBand { .. })
        ));
    }

    #[test]
    fn default_bands_do_not_overlap() {
        for (t, fs) in [(1000, 200.0), (512, 200.0), (256, 128.0), (250, 100.0)] {
            let bins = band_bins(&DEFAULT_BANDS, t, fs).unwrap();
            for w in bins.windows(2) {
                assert!(w[0].1 <= w[1].0, "{bins:?}");
            }
        }
    }

    #[test]
    fn hundred_trials_split_sixty_ten_thirty() {
        let set = tiny_set(&[20; 5]);
        let a = split_trials(&set, SplitRatios::default(), 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (60, 10, 30));
        let b = split_trials(&set, SplitRatios::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = split_trials(&set, SplitRatios::default(), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn two_classes_each_split_sees_both() {
        let set = tiny_set(&[10, 10]);
        let a = split_trials(&set, SplitRatios::default(), 3).unwrap();
        for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let labels: BTreeSet<usize> = a
                .indices(&set, split)
                .iter()
                .map(|&i| set.recordings[i].label)
                .collect();
            assert_eq!(labels.len(), 2, "{split:?}");
        }
        // 6/1/3 per class
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (12, 2, 6));
    }

    #[test]
    fn uneven_classes_still_hit_targets() {
        let set = tiny_set(&[7, 5, 11]);
        let a = split_trials(&set, SplitRatios::default(), 1).unwrap();
        assert_eq!(a.total(), 23);
        assert_eq!((a.train.len(), a.val.len()), (14, 2));
    }

    #[test]
    fn too_few_trials_names_missing_classes() {
        let set = tiny_set(&[3, 0, 0, 0]);
        match split_trials(&set, SplitRatios::default(), 0) {
            Err(LelError::DeficientClasses { classes, .. }) => assert_eq!(classes, vec![1, 2, 3]),
            other => panic!("unexpected {other:?}"),
        }
        let few = tiny_set(&[4, 4]);
        assert!(matches!(
            split_trials(&few, SplitRatios::default(), 0),
            Err(LelError::Split(_))
        ));
    }

    #[test]
    fn synth_rejects_exhausted_signatures() {
        let spec = SynthSpec {
            n_classes: 11,
            n_channels: 2,
            ..SynthSpec::default()
        };
        let err = synth_dataset(&spec).unwrap_err().to_string();
        assert!(err.contains("exhausted"), "{err}");
    }

    #[test]
    fn signatures_are_distinct() {
        let spec = SynthSpec {
            n_classes: 12,
            n_channels: 4,
            ..SynthSpec::default()
        };
        let sigs: BTreeSet<(usize, Vec<usize>)> = (0..12).map(|k| spec.signature(k)).collect();
        assert_eq!(sigs.len(), 12);
        assert!(sigs.iter().all(|(_, ch)| !ch.is_empty()));
    }

    #[test]
    fn pink_noise_has_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = 0.0;
        for _ in 0..50 {
            let x = pink_noise(512, 200.0, 1.0, &mut rng);
            acc += x.iter().map(|v| v * v).sum::<f64>() / 512.0;
        }
        let var = acc / 50.0;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }
}
