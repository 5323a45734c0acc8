use std::path::Path;

use super::annotations::{encode_tal, Annotation};
use super::{EdfHeader, SignalHeader, ANNOTATION_LABEL, FIXED_HEADER, PER_SIGNAL_HEADER};
use crate::error::{Error, Result};

/// An ordinary signal to be written, in physical units.
#[derive(Debug, Clone)]
pub struct SignalSpec {
    pub label: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub samples_per_record: usize,
    pub samples: Vec<f64>,
}

impl SignalSpec {
    /// A signal with the 16-bit digital range and a symmetric physical range.
    pub fn new(label: &str, samples_per_record: usize, physical_range: f64, samples: Vec<f64>) -> Self {
        SignalSpec {
            label: label.to_string(),
            physical_dimension: "uV".into(),
            physical_min: -physical_range,
            physical_max: physical_range,
            digital_min: -32768,
            digital_max: 32767,
            samples_per_record,
            samples,
        }
    }
}

/// Builds EDF/EDF+ files, mostly for fixtures and synthetic datasets.
#[derive(Debug, Clone)]
pub struct EdfWriter {
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub record_duration: f64,
    pub signals: Vec<SignalSpec>,
    pub annotations: Vec<Annotation>,
    /// Annotation signal size per record, in bytes (rounded up to even).
    pub annotation_bytes: usize,
    /// Number of records when there are no ordinary signals.
    pub records: usize,
}

impl EdfWriter {
    pub fn new(record_duration: f64) -> Self {
        EdfWriter {
            patient: "X X X X".into(),
            recording: "Startdate X X X X".into(),
            start_date: "01.01.89".into(),
            start_time: "00.00.00".into(),
            record_duration,
            signals: Vec::new(),
            annotations: Vec::new(),
            annotation_bytes: 0,
            records: 1,
        }
    }

    pub fn signal(mut self, spec: SignalSpec) -> Self {
        self.signals.push(spec);
        self
    }

    /// Adds an EDF+ annotation signal of `bytes_per_record` bytes.
    pub fn annotations(mut self, annotations: Vec<Annotation>, bytes_per_record: usize) -> Self {
        self.annotations = annotations;
        self.annotation_bytes = bytes_per_record.div_ceil(2) * 2;
        self
    }

    fn edf_plus(&self) -> bool {
        self.annotation_bytes > 0
    }

    fn record_count(&self) -> Result<usize> {
        let mut count = None;
        for s in &self.signals {
            if s.samples_per_record == 0 || s.samples.len() % s.samples_per_record != 0 {
                return Err(Error::Argument(format!(
                    "signal {:?}: {} samples is not a whole number of {}-sample records",
                    s.label,
                    s.samples.len(),
                    s.samples_per_record
                )));
            }
            let n = s.samples.len() / s.samples_per_record;
            match count {
                Some(c) if c != n => {
                    return Err(Error::Argument(format!(
                        "signal {:?} spans {n} records, others span {c}",
                        s.label
                    )))
                }
                _ => count = Some(n),
            }
        }
        Ok(count.unwrap_or(self.records))
    }

    pub fn header(&self) -> Result<EdfHeader> {
        let mut signals: Vec<SignalHeader> = self
            .signals
            .iter()
            .map(|s| SignalHeader {
                label: s.label.clone(),
                transducer: String::new(),
                physical_dimension: s.physical_dimension.clone(),
                physical_min: s.physical_min,
                physical_max: s.physical_max,
                digital_min: s.digital_min,
                digital_max: s.digital_max,
                prefiltering: String::new(),
                samples_per_record: s.samples_per_record,
                reserved: String::new(),
            })
            .collect();
        if self.edf_plus() {
            signals.push(SignalHeader {
                label: ANNOTATION_LABEL.into(),
                transducer: String::new(),
                physical_dimension: String::new(),
                physical_min: -1.0,
                physical_max: 1.0,
                digital_min: -32768,
                digital_max: 32767,
                prefiltering: String::new(),
                samples_per_record: self.annotation_bytes / 2,
                reserved: String::new(),
            });
        }
        Ok(EdfHeader {
            version: "0".into(),
            patient: self.patient.clone(),
            recording: self.recording.clone(),
            start_date: self.start_date.clone(),
            start_time: self.start_time.clone(),
            header_bytes: FIXED_HEADER + PER_SIGNAL_HEADER * signals.len(),
            reserved: if self.edf_plus() { "EDF+C".into() } else { String::new() },
            data_records: self.record_count()?,
            record_duration: self.record_duration,
            signals,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        let mut out = header.to_bytes()?;
        let mut pending = self.annotations.iter().peekable();
        for r in 0..header.data_records {
            for (si, s) in self.signals.iter().enumerate() {
                let sig = &header.signals[si];
                let chunk = &s.samples[r * s.samples_per_record..][..s.samples_per_record];
                for &v in chunk {
                    out.extend_from_slice(&sig.to_digital(v).to_le_bytes());
                }
            }
            if self.edf_plus() {
                let mut block = encode_tal(r as f64 * self.record_duration, None, &[]);
                while let Some(a) = pending.peek() {
                    let tal = encode_tal(a.onset, a.duration, &[a.text.as_str()]);
                    if block.len() + tal.len() > self.annotation_bytes {
                        break;
                    }
                    block.extend(tal);
                    pending.next();
                }
                if block.len() > self.annotation_bytes {
                    return Err(Error::Argument(
                        "annotation signal too small for its timekeeping entry".into(),
                    ));
                }
                block.resize(self.annotation_bytes, 0);
                out.extend(block);
            }
        }
        if pending.peek().is_some() {
            return Err(Error::Argument(
                "annotations do not fit in the annotation signal; raise bytes per record".into(),
            ));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}
