//! Synthetic recordings in which every stage has its own sinusoid
//! frequency, for convergence tests and end-to-end smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edf::{encode_tal, Annotation, EdfWriter, SignalSpec};
use crate::error::Result;
use crate::ingest::{SleepEpochSequence, Window, CHANNELS, EPOCH_SAMPLES, NUM_CLASSES};

/// Cycles per epoch for each stage, EEG channel. EOG uses half the rate.
pub const STAGE_CYCLES: [f64; NUM_CLASSES] = [3.0, 6.0, 10.0, 15.0, 21.0];

/// Interleaved (sample, channel) values of one epoch of `n` samples.
pub fn epoch_signal(label: u8, n: usize, amplitude: f64, noise: f64, rng: &mut impl Rng) -> Vec<f32> {
    let cycles = STAGE_CYCLES[label as usize];
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n * CHANNELS);
    for t in 0..n {
        let x = std::f64::consts::TAU * cycles * t as f64 / n as f64 + phase;
        let eeg = amplitude * x.sin() + noise * rng.random_range(-1.0..1.0);
        let eog = amplitude * (0.5 * x).cos() + noise * rng.random_range(-1.0..1.0);
        out.push(eeg as f32);
        out.push(eog as f32);
    }
    out
}

/// Fully labelled windows of `seq_len` epochs of `epoch_len` samples.
pub fn windows(count: usize, seq_len: usize, epoch_len: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let labels: Vec<u8> = (0..seq_len)
                .map(|j| ((i * seq_len + j) % NUM_CLASSES) as u8)
                .collect();
            let input = labels
                .iter()
                .flat_map(|&l| epoch_signal(l, epoch_len, 1.0, 0.1, &mut rng))
                .collect();
            Window {
                start_epoch: i * seq_len,
                input,
                labels,
                real: vec![true; seq_len],
            }
        })
        .collect()
}

/// A plausible hypnogram: wake, cycles of N1-N2-N3-N2-REM, wake.
pub fn hypnogram(epochs: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wake = (epochs / 6).max(1);
    let mut out = vec![0u8; wake];
    let cycle = [1u8, 2, 2, 3, 3, 2, 4, 4];
    while out.len() + wake < epochs {
        let stage = cycle[out.len() % cycle.len()];
        let run = rng.random_range(1..4);
        for _ in 0..run {
            if out.len() + wake < epochs {
                out.push(stage);
            }
        }
    }
    out.resize(epochs, 0);
    out
}

/// A full-rate (100 Hz) labelled night.
pub fn sequence(subject: &str, labels: &[u8], seed: u64) -> Result<SleepEpochSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = labels
        .iter()
        .flat_map(|&l| epoch_signal(l, EPOCH_SAMPLES, 40.0, 4.0, &mut rng))
        .collect();
    SleepEpochSequence::new(subject, labels.to_vec(), samples)
}

const HYPNOGRAM_TEXT: [&str; NUM_CLASSES] = [
    "Sleep stage W",
    "Sleep stage 1",
    "Sleep stage 2",
    "Sleep stage 3",
    "Sleep stage R",
];

/// PSG and hypnogram EDF+ file contents for a synthetic night, in the
/// layout of the public sleep-cassette recordings.
pub fn edf_pair(labels: &[u8], seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    let seq = sequence("synthetic", labels, seed)?;
    let channel = |c: usize| -> Vec<f64> {
        seq.samples().iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect()
    };
    let psg = EdfWriter::new(30.0)
        .signal(SignalSpec::new("EEG Fpz-Cz", EPOCH_SAMPLES, 200.0, channel(0)))
        .signal(SignalSpec::new("EEG Pz-Oz", EPOCH_SAMPLES, 200.0, channel(0)))
        .signal(SignalSpec::new("EOG horizontal", EPOCH_SAMPLES, 200.0, channel(1)))
        .to_bytes()?;

    let mut runs: Vec<Annotation> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let text = HYPNOGRAM_TEXT[l as usize];
        match runs.last_mut() {
            Some(a) if a.text == text => *a.duration.as_mut().unwrap() += 30.0,
            _ => runs.push(Annotation {
                onset: 30.0 * i as f64,
                duration: Some(30.0),
                text: text.to_string(),
            }),
        }
    }
    let bytes: usize = runs
        .iter()
        .map(|a| encode_tal(a.onset, a.duration, &[a.text.as_str()]).len())
        .sum::<usize>()
        + 16;
    let mut hyp = EdfWriter::new(0.0).annotations(runs, bytes);
    hyp.records = 1;
    Ok((psg, hyp.to_bytes()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{parse_edf_bytes, stage_intervals};
    use crate::ingest::{build_epochs, EpochConfig};

    #[test]
    fn windows_are_labelled_cyclically() {
        let w = windows(3, 4, 50, 1);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].labels, vec![4, 0, 1, 2]);
        assert_eq!(w[0].input.len(), 4 * 50 * CHANNELS);
        assert_eq!(w, windows(3, 4, 50, 1));
    }

    #[test]
    fn hypnogram_has_every_stage() {
        let h = hypnogram(300, 0);
        assert_eq!(h.len(), 300);
        for c in 0..5u8 {
            assert!(h.contains(&c), "stage {c} missing");
        }
        assert_eq!(h[0], 0);
        assert_eq!(*h.last().unwrap(), 0);
    }

    #[test]
    fn edf_pair_survives_ingestion() {
        let labels = hypnogram(40, 3);
        let (psg, hyp) = edf_pair(&labels, 3).unwrap();
        let rec = parse_edf_bytes(&psg).unwrap();
        let intervals = stage_intervals(&parse_edf_bytes(&hyp).unwrap().annotations).unwrap();
        let seq = build_epochs("x", &rec, &intervals, &EpochConfig::default()).unwrap();
        assert_eq!(seq.labels(), &labels[..]);
    }
}
