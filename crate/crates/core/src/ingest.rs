//! Turns a polysomnography recording and its hypnogram into labelled 30 s
//! epochs, fixed-length model windows, and on-disk epoch caches.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edf::{EdfRecording, StageInterval};
use crate::error::{Error, Result};

pub const EPOCH_SECONDS: f64 = 30.0;
pub const SAMPLE_RATE: f64 = 100.0;
pub const EPOCH_SAMPLES: usize = 3000;
pub const CHANNELS: usize = 2;
pub const NUM_CLASSES: usize = 5;
pub const STAGE_NAMES: [&str; NUM_CLASSES] = ["W", "N1", "N2", "N3", "REM"];

/// Maps hypnogram text to a stage code: W=0, N1=1, N2=2, N3/N4=3, REM=4.
/// Movement, unscored, and unknown text map to `None`.
pub fn stage_code(text: &str) -> Option<u8> {
    let t = text.trim();
    let stage = t.strip_prefix("Sleep stage ").unwrap_or(t);
    match stage.to_ascii_uppercase().as_str() {
        "W" => Some(0),
        "1" | "N1" => Some(1),
        "2" | "N2" => Some(2),
        "3" | "4" | "N3" | "N4" => Some(3),
        "R" | "REM" => Some(4),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    /// Case-insensitive substring of the EEG channel label.
    pub eeg_channel: String,
    /// Case-insensitive substring of the EOG channel label.
    pub eog_channel: String,
    /// Wake epochs kept before the first and after the last sleep epoch.
    pub wake_margin_epochs: usize,
    /// Hypnogram onset shift in seconds (hypnogram start minus recording start).
    pub hypnogram_offset: f64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            eeg_channel: "Fpz-Cz".into(),
            eog_channel: "horizontal".into(),
            wake_margin_epochs: 60,
            hypnogram_offset: 0.0,
        }
    }
}

/// One night of labelled epochs, samples stored (epoch, sample, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct SleepEpochSequence {
    pub subject: String,
    labels: Vec<u8>,
    samples: Vec<f32>,
}

impl SleepEpochSequence {
    pub fn new(subject: impl Into<String>, labels: Vec<u8>, samples: Vec<f32>) -> Result<Self> {
        let per_epoch = EPOCH_SAMPLES * CHANNELS;
        if samples.len() != labels.len() * per_epoch {
            return Err(Error::Shape(format!(
                "{} samples for {} epochs of {per_epoch}",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {bad} outside 0..5")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite sample value".into()));
        }
        Ok(SleepEpochSequence {
            subject: subject.into(),
            labels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// Interleaved (sample, channel) values of epoch `i`.
    pub fn epoch(&self, i: usize) -> &[f32] {
        let per = EPOCH_SAMPLES * CHANNELS;
        &self.samples[i * per..][..per]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn checked_channel(rec: &EdfRecording, pattern: &str, role: &str) -> Result<usize> {
    let idx = rec.find_signal(pattern).ok_or_else(|| {
        Error::Config(format!(
            "no {role} channel matching {pattern:?}; available: {}",
            rec.signal_labels().join(", ")
        ))
    })?;
    let rate = rec.header.signals[idx].sample_rate(rec.header.record_duration);
    if (rate - SAMPLE_RATE).abs() > 1e-9 {
        return Err(Error::Rate(format!(
            "{role} channel {:?} is sampled at {rate} Hz, expected {SAMPLE_RATE} Hz",
            rec.header.signals[idx].label
        )));
    }
    Ok(idx)
}

/// Cuts a recording into scored 30 s epochs.
///
/// Epochs are labelled from the hypnogram on the recording timeline; the
/// timeline is trimmed to `wake_margin_epochs` before the first and after the
/// last non-wake epoch, then epochs without a sleep stage (movement,
/// unscored, uncovered) are dropped.
pub fn build_epochs(
    subject: &str,
    rec: &EdfRecording,
    hypnogram: &[StageInterval],
    cfg: &EpochConfig,
) -> Result<SleepEpochSequence> {
    let eeg = checked_channel(rec, &cfg.eeg_channel, "EEG")?;
    let eog = checked_channel(rec, &cfg.eog_channel, "EOG")?;
    let eeg_data = &rec.samples[eeg];
    let eog_data = &rec.samples[eog];
    let total = eeg_data.len().min(eog_data.len()) / EPOCH_SAMPLES;

    let mut timeline: Vec<Option<u8>> = vec![None; total];
    for iv in hypnogram {
        let code = stage_code(&iv.text);
        let first = ((iv.onset + cfg.hypnogram_offset) / EPOCH_SECONDS).round();
        let count = (iv.duration / EPOCH_SECONDS).round() as usize;
        if first < 0.0 {
            continue;
        }
        let first = first as usize;
        for slot in timeline.iter_mut().skip(first).take(count) {
            *slot = code;
        }
    }

    let is_sleep = |s: &Option<u8>| matches!(s, Some(c) if *c != 0);
    let (Some(first), Some(last)) = (
        timeline.iter().position(is_sleep),
        timeline.iter().rposition(is_sleep),
    ) else {
        return Err(Error::Validation(format!(
            "{subject}: hypnogram contains no sleep epochs"
        )));
    };
    let start = first.saturating_sub(cfg.wake_margin_epochs);
    let end = (last + cfg.wake_margin_epochs).min(total - 1);

    let mut labels = Vec::new();
    let mut samples = Vec::new();
    for (i, slot) in timeline.iter().enumerate().take(end + 1).skip(start) {
        let Some(code) = *slot else { continue };
        labels.push(code);
        let base = i * EPOCH_SAMPLES;
        for t in 0..EPOCH_SAMPLES {
            samples.push(eeg_data[base + t] as f32);
            samples.push(eog_data[base + t] as f32);
        }
    }
    SleepEpochSequence::new(subject, labels, samples)
}

/// L consecutive epochs, flattened to (L * 3000, 2) for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start_epoch: usize,
    pub input: Vec<f32>,
    pub labels: Vec<u8>,
    /// `false` marks padding positions, excluded from loss and metrics.
    pub real: Vec<bool>,
}

impl Window {
    pub fn real_count(&self) -> usize {
        self.real.iter().filter(|r| **r).count()
    }
}

/// Slides a window of `seq_len` epochs with step `stride`. The final window
/// is right-padded by repeating the last epoch when the sequence runs out.
pub fn window_sequences(seq: &SleepEpochSequence, seq_len: usize, stride: usize) -> Result<Vec<Window>> {
    if stride < 1 || seq_len < 1 {
        return Err(Error::Argument("window length and stride must be >= 1".into()));
    }
    if seq.is_empty() {
        return Err(Error::Argument(format!(
            "{}: cannot window an empty epoch sequence",
            seq.subject
        )));
    }
    let n = seq.len();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let mut input = Vec::with_capacity(seq_len * EPOCH_SAMPLES * CHANNELS);
        let mut labels = Vec::with_capacity(seq_len);
        let mut real = Vec::with_capacity(seq_len);
        for i in start..start + seq_len {
            let src = i.min(n - 1);
            input.extend_from_slice(seq.epoch(src));
            labels.push(seq.labels()[src]);
            real.push(i < n);
        }
        out.push(Window {
            start_epoch: start,
            input,
            labels,
            real,
        });
        if start + seq_len >= n {
            break;
        }
        start += stride;
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 4] = b"SSNP";
const CACHE_VERSION: u32 = 1;

pub fn encode_cache(seq: &SleepEpochSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + seq.len() + seq.samples.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        seq.len() as u32,
        EPOCH_SAMPLES as u32,
        CHANNELS as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&seq.labels);
    for v in &seq.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cache(subject: &str, bytes: &[u8]) -> Result<SleepEpochSequence> {
    if bytes.len() < 20 {
        return Err(Error::parse(bytes.len(), "cache header truncated"));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(Error::parse(0, "not an epoch cache (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, count, n, channels) = (word(0), word(1), word(2), word(3));
    if version != CACHE_VERSION as usize {
        return Err(Error::parse(4, format!("unsupported cache version {version}")));
    }
    if n != EPOCH_SAMPLES || channels != CHANNELS {
        return Err(Error::parse(
            12,
            format!("cache holds {n}x{channels} epochs, expected {EPOCH_SAMPLES}x{CHANNELS}"),
        ));
    }
    let expected = 20 + count + count * n * channels * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            bytes.len().min(expected),
            format!("cache size {} does not match {count} epochs ({expected} bytes)", bytes.len()),
        ));
    }
    let labels = bytes[20..20 + count].to_vec();
    let samples = bytes[20 + count..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    SleepEpochSequence::new(subject, labels, samples)
}

/// Writes the cache through a temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_cache(path: impl AsRef<Path>, seq: &SleepEpochSequence) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ssnp.tmp");
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode_cache(seq))?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>, subject: &str) -> Result<SleepEpochSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(subject, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{parse_edf_bytes, EdfWriter, SignalSpec};
    use proptest::prelude::*;

    fn interval(onset: f64, epochs: usize, text: &str) -> StageInterval {
        StageInterval {
            onset,
            duration: epochs as f64 * EPOCH_SECONDS,
            text: text.into(),
        }
    }

    fn recording(epochs: usize) -> EdfRecording {
        let n = epochs * EPOCH_SAMPLES;
        let eeg: Vec<f64> = (0..n).map(|i| (i % 97) as f64 - 48.0).collect();
        let eog: Vec<f64> = (0..n).map(|i| (i % 13) as f64).collect();
        let bytes = EdfWriter::new(30.0)
            .signal(SignalSpec::new("EEG Fpz-Cz", EPOCH_SAMPLES, 200.0, eeg))
            .signal(SignalSpec::new("EOG horizontal", EPOCH_SAMPLES, 200.0, eog))
            .to_bytes()
            .unwrap();
        parse_edf_bytes(&bytes).unwrap()
    }

    fn sequence(labels: Vec<u8>) -> SleepEpochSequence {
        let samples = labels
            .iter()
            .enumerate()
            .flat_map(|(i, _)| std::iter::repeat_n(i as f32, EPOCH_SAMPLES * CHANNELS))
            .collect();
        SleepEpochSequence::new("s", labels, samples).unwrap()
    }

    #[test]
    fn stage_mapping() {
        assert_eq!(stage_code("Sleep stage W"), Some(0));
        assert_eq!(stage_code("Sleep stage 4"), Some(3));
        assert_eq!(stage_code("Sleep stage 3"), Some(3));
        assert_eq!(stage_code("Sleep stage R"), Some(4));
        assert_eq!(stage_code("Sleep stage ?"), None);
        assert_eq!(stage_code("Movement time"), None);
    }

    #[test]
    fn trims_wake_to_thirty_minutes_each_side() {
        let rec = recording(210);
        let hyp = vec![
            interval(0.0, 100, "Sleep stage W"),
            interval(3000.0, 10, "Sleep stage 2"),
            interval(3300.0, 100, "Sleep stage W"),
        ];
        let seq = build_epochs("s", &rec, &hyp, &EpochConfig::default()).unwrap();
        assert_eq!(seq.len(), 130);
        assert_eq!(seq.class_counts(), [120, 0, 10, 0, 0]);
        // first kept epoch is recording epoch 40
        let eeg0 = ((40 * EPOCH_SAMPLES) % 97) as f32 - 48.0;
        assert!((seq.epoch(0)[0] - eeg0).abs() < 0.01);
    }

    #[test]
    fn merges_n4_and_drops_movement() {
        let rec = recording(5);
        let hyp = vec![
            interval(0.0, 1, "Sleep stage 2"),
            interval(30.0, 1, "Sleep stage 4"),
            interval(60.0, 1, "Movement time"),
            interval(90.0, 1, "Sleep stage R"),
            interval(120.0, 1, "Sleep stage 1"),
        ];
        let seq = build_epochs("s", &rec, &hyp, &EpochConfig::default()).unwrap();
        assert_eq!(seq.labels(), &[2, 3, 4, 1]);
    }

    #[test]
    fn missing_channel_lists_labels() {
        let rec = recording(2);
        let cfg = EpochConfig {
            eog_channel: "ROC-LOC".into(),
            ..EpochConfig::default()
        };
        let err = build_epochs("s", &rec, &[interval(0.0, 2, "Sleep stage 2")], &cfg).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("EOG horizontal"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let bytes = EdfWriter::new(1.0)
            .signal(SignalSpec::new("EEG Fpz-Cz", 50, 1.0, vec![0.0; 3000]))
            .signal(SignalSpec::new("EOG horizontal", 50, 1.0, vec![0.0; 3000]))
            .to_bytes()
            .unwrap();
        let rec = parse_edf_bytes(&bytes).unwrap();
        let err = build_epochs("s", &rec, &[], &EpochConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Rate(_)));
    }

    #[test]
    fn windows_pad_the_tail() {
        let seq = sequence((0..45).map(|i| (i % 5) as u8).collect());
        let w = window_sequences(&seq, 20, 20).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].real_count(), 5);
        assert_eq!(w[2].labels[19], seq.labels()[44]);
        assert_eq!(w[2].input.len(), 20 * EPOCH_SAMPLES * CHANNELS);
        assert_eq!(*w[2].input.last().unwrap(), 44.0);

        let seq = sequence(vec![1; 20]);
        let w = window_sequences(&seq, 20, 20).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].real_count(), 20);
    }

    #[test]
    fn window_errors() {
        let seq = sequence(vec![0; 3]);
        assert!(window_sequences(&seq, 20, 0).is_err());
        let empty = SleepEpochSequence::new("e", vec![], vec![]).unwrap();
        assert!(window_sequences(&empty, 20, 20).is_err());
    }

    #[test]
    fn cache_rejects_bad_input() {
        assert!(decode_cache("s", b"SSN").is_err());
        let mut bytes = encode_cache(&sequence(vec![0, 1]));
        assert!(decode_cache("s", &bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_cache("s", &bytes).is_err());
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("night.ssnp");
        let seq = sequence(vec![0, 4, 2]);
        write_cache(&path, &seq).unwrap();
        assert_eq!(read_cache(&path, "s").unwrap(), seq);
        assert!(!path.with_extension("ssnp.tmp").exists());
    }

    proptest! {
        #[test]
        fn unpadded_window_labels_partition_the_sequence(
            labels in proptest::collection::vec(0u8..5, 1..70),
            window in 1usize..25,
        ) {
            let seq = sequence(labels.clone());
            let ws = window_sequences(&seq, window, window).unwrap();
            let joined: Vec<u8> = ws
                .iter()
                .flat_map(|w| w.labels.iter().zip(&w.real).filter(|(_, r)| **r).map(|(l, _)| *l))
                .collect();
            prop_assert_eq!(joined, labels);
        }

        #[test]
        fn cache_round_trip(labels in proptest::collection::vec(0u8..5, 0..4), seed in 0u32..1000) {
            let n = labels.len() * EPOCH_SAMPLES * CHANNELS;
            let samples: Vec<f32> = (0..n).map(|i| ((i as u32 ^ seed) % 1000) as f32 * 0.37 - 100.0).collect();
            let seq = SleepEpochSequence::new("p", labels, samples).unwrap();
            prop_assert_eq!(decode_cache("p", &encode_cache(&seq)).unwrap(), seq);
        }
    }
}
