//! EDF and EDF+ biosignal files.
//!
//! Layout: a 256-byte fixed header of space-padded ASCII fields, then 256
//! bytes per signal (each field stored signal-major), then data records. A
//! record holds `samples_per_record` little-endian `i16` values for every
//! signal in header order. EDF+ files mark the reserved field with `EDF+C` or
//! `EDF+D` and carry time-stamped annotation lists in signals labelled
//! `EDF Annotations`.

mod annotations;
mod writer;

use std::path::Path;

pub use annotations::{encode_tal, parse_hypnogram, parse_tals, stage_intervals, Annotation, StageInterval};
pub use writer::{EdfWriter, SignalSpec};

use crate::error::{Error, Result};

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

const FIXED_HEADER: usize = 256;
const PER_SIGNAL_HEADER: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    /// Samples per second, given the record duration.
    pub fn sample_rate(&self, record_duration: f64) -> f64 {
        if record_duration > 0.0 {
            self.samples_per_record as f64 / record_duration
        } else {
            0.0
        }
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        let scale = (self.physical_max - self.physical_min)
            / (self.digital_max - self.digital_min) as f64;
        (digital as f64 - self.digital_min as f64) * scale + self.physical_min
    }

    pub fn to_digital(&self, physical: f64) -> i16 {
        let scale = (self.digital_max - self.digital_min) as f64
            / (self.physical_max - self.physical_min);
        let d = ((physical - self.physical_min) * scale + self.digital_min as f64).round();
        d.clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub reserved: String,
    pub data_records: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn is_edf_plus(&self) -> bool {
        self.reserved.starts_with("EDF+")
    }

    /// Bytes in one data record.
    pub fn record_bytes(&self) -> usize {
        self.signals.iter().map(|s| 2 * s.samples_per_record).sum()
    }

    /// Seconds since 1985-01-01 00:00:00 of the recording start.
    pub fn start_seconds(&self) -> Result<i64> {
        clock_seconds(&self.start_date, &self.start_time)
    }

    /// Serializes the header block. Parsing a header and serializing it
    /// reproduces the original bytes when numbers were written in their
    /// shortest form.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(FIXED_HEADER + PER_SIGNAL_HEADER * self.signals.len());
        put(&mut out, &self.version, 8)?;
        put(&mut out, &self.patient, 80)?;
        put(&mut out, &self.recording, 80)?;
        put(&mut out, &self.start_date, 8)?;
        put(&mut out, &self.start_time, 8)?;
        put(&mut out, &self.header_bytes.to_string(), 8)?;
        put(&mut out, &self.reserved, 44)?;
        put(&mut out, &self.data_records.to_string(), 8)?;
        put(&mut out, &format_number(self.record_duration), 8)?;
        put(&mut out, &self.signals.len().to_string(), 4)?;
        let sig = &self.signals;
        for s in sig {
            put(&mut out, &s.label, 16)?;
        }
        for s in sig {
            put(&mut out, &s.transducer, 80)?;
        }
        for s in sig {
            put(&mut out, &s.physical_dimension, 8)?;
        }
        for s in sig {
            put(&mut out, &format_number(s.physical_min), 8)?;
        }
        for s in sig {
            put(&mut out, &format_number(s.physical_max), 8)?;
        }
        for s in sig {
            put(&mut out, &s.digital_min.to_string(), 8)?;
        }
        for s in sig {
            put(&mut out, &s.digital_max.to_string(), 8)?;
        }
        for s in sig {
            put(&mut out, &s.prefiltering, 80)?;
        }
        for s in sig {
            put(&mut out, &s.samples_per_record.to_string(), 8)?;
        }
        for s in sig {
            put(&mut out, &s.reserved, 32)?;
        }
        Ok(out)
    }
}

/// A fully decoded EDF/EDF+ file.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfRecording {
    pub header: EdfHeader,
    /// Physical-unit samples per signal; empty for annotation signals.
    pub samples: Vec<Vec<f64>>,
    pub annotations: Vec<Annotation>,
}

impl EdfRecording {
    pub fn signal_labels(&self) -> Vec<String> {
        self.header.signals.iter().map(|s| s.label.clone()).collect()
    }

    /// Index of the first ordinary signal whose label contains `pattern`,
    /// compared case-insensitively.
    pub fn find_signal(&self, pattern: &str) -> Option<usize> {
        let needle = pattern.to_lowercase();
        self.header
            .signals
            .iter()
            .position(|s| !s.is_annotation() && s.label.to_lowercase().contains(&needle))
    }
}

pub fn parse_edf(path: impl AsRef<Path>) -> Result<EdfRecording> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_edf_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, width: usize) -> Result<(usize, String)> {
        let start = self.pos;
        let Some(raw) = self.bytes.get(start..start + width) else {
            return Err(Error::parse(
                self.bytes.len(),
                format!("file truncated inside the header (needed {width} bytes at {start})"),
            ));
        };
        if !raw.iter().all(|b| (0x20..=0x7e).contains(b)) {
            return Err(Error::parse(start, "header field contains non-printable bytes"));
        }
        self.pos += width;
        let text = std::str::from_utf8(raw).expect("printable ASCII");
        Ok((start, text.trim_end().to_string()))
    }

    fn number<N: std::str::FromStr>(&mut self, width: usize, what: &str) -> Result<N> {
        let (offset, text) = self.field(width)?;
        text.trim()
            .parse()
            .map_err(|_| Error::parse(offset, format!("{what} is not numeric: {text:?}")))
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<EdfHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let (_, version) = c.field(8)?;
    if version.trim() != "0" {
        return Err(Error::parse(0, format!("unsupported version field {version:?}")));
    }
    let (_, patient) = c.field(80)?;
    let (_, recording) = c.field(80)?;
    let (_, start_date) = c.field(8)?;
    let (_, start_time) = c.field(8)?;
    let header_bytes: usize = c.number(8, "header byte count")?;
    let (_, reserved) = c.field(44)?;
    let records_offset = c.pos;
    let records: i64 = c.number(8, "data record count")?;
    let duration_offset = c.pos;
    let record_duration: f64 = c.number(8, "data record duration")?;
    let ns_offset = c.pos;
    let ns: usize = c.number(4, "signal count")?;
    if !record_duration.is_finite() || record_duration < 0.0 {
        return Err(Error::parse(duration_offset, "negative record duration"));
    }
    if ns == 0 {
        return Err(Error::parse(ns_offset, "file declares zero signals"));
    }
    if header_bytes != FIXED_HEADER + PER_SIGNAL_HEADER * ns {
        return Err(Error::parse(
            184,
            format!("header size {header_bytes} does not match {ns} signals"),
        ));
    }

    let texts = |c: &mut Cursor, width: usize| -> Result<Vec<String>> {
        (0..ns).map(|_| c.field(width).map(|(_, t)| t)).collect()
    };
    fn numbers<N: std::str::FromStr>(c: &mut Cursor, ns: usize, width: usize, what: &str) -> Result<Vec<N>> {
        (0..ns).map(|_| c.number(width, what)).collect()
    }
    let labels = texts(&mut c, 16)?;
    let transducers = texts(&mut c, 80)?;
    let dims = texts(&mut c, 8)?;
    let phys_min_offset = c.pos;
    let phys_min: Vec<f64> = numbers(&mut c, ns, 8, "physical minimum")?;
    let phys_max: Vec<f64> = numbers(&mut c, ns, 8, "physical maximum")?;
    let dig_min_offset = c.pos;
    let dig_min: Vec<i32> = numbers(&mut c, ns, 8, "digital minimum")?;
    let dig_max: Vec<i32> = numbers(&mut c, ns, 8, "digital maximum")?;
    let prefilter = texts(&mut c, 80)?;
    let spr: Vec<usize> = numbers(&mut c, ns, 8, "samples per record")?;
    let reserved_sig = texts(&mut c, 32)?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: phys_min[i],
            physical_max: phys_max[i],
            digital_min: dig_min[i],
            digital_max: dig_max[i],
            prefiltering: prefilter[i].clone(),
            samples_per_record: spr[i],
            reserved: reserved_sig[i].clone(),
        };
        if !s.is_annotation() {
            if s.physical_min == s.physical_max {
                return Err(Error::parse(
                    phys_min_offset + 8 * i,
                    format!("signal {:?} has physical min == max", s.label),
                ));
            }
            if s.digital_min >= s.digital_max {
                return Err(Error::parse(
                    dig_min_offset + 8 * i,
                    format!("signal {:?} has digital min >= max", s.label),
                ));
            }
        }
        signals.push(s);
    }

    let mut header = EdfHeader {
        version,
        patient,
        recording,
        start_date,
        start_time,
        header_bytes,
        reserved,
        data_records: 0,
        record_duration,
        signals,
    };
    let record_bytes = header.record_bytes();
    let data_len = bytes.len().saturating_sub(header_bytes);
    header.data_records = match records {
        -1 if record_bytes > 0 && data_len % record_bytes == 0 => data_len / record_bytes,
        n if n >= 0 => n as usize,
        _ => {
            return Err(Error::parse(
                records_offset,
                format!("invalid data record count {records}"),
            ))
        }
    };
    Ok(header)
}

pub fn parse_edf_bytes(bytes: &[u8]) -> Result<EdfRecording> {
    let header = parse_header(bytes)?;
    let record_bytes = header.record_bytes();
    let expected = header.header_bytes + header.data_records * record_bytes;
    if bytes.len() < expected {
        return Err(Error::parse(
            bytes.len(),
            format!(
                "truncated data: {} records of {record_bytes} bytes need {expected} bytes",
                header.data_records
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::parse(
            expected,
            format!(
                "{} trailing bytes after the declared {} data records",
                bytes.len() - expected,
                header.data_records
            ),
        ));
    }

    let ns = header.signals.len();
    let mut samples: Vec<Vec<f64>> = header
        .signals
        .iter()
        .map(|s| {
            if s.is_annotation() {
                Vec::new()
            } else {
                Vec::with_capacity(s.samples_per_record * header.data_records)
            }
        })
        .collect();
    let mut annotations = Vec::new();
    let mut pos = header.header_bytes;
    for _ in 0..header.data_records {
        for (si, sig) in header.signals.iter().enumerate().take(ns) {
            let n = sig.samples_per_record * 2;
            let chunk = &bytes[pos..pos + n];
            if sig.is_annotation() {
                annotations.extend(parse_tals(chunk, pos)?);
            } else {
                let out = &mut samples[si];
                out.extend(
                    chunk
                        .chunks_exact(2)
                        .map(|b| sig.to_physical(i16::from_le_bytes([b[0], b[1]]))),
                );
            }
            pos += n;
        }
    }
    Ok(EdfRecording {
        header,
        samples,
        annotations,
    })
}

fn put(out: &mut Vec<u8>, text: &str, width: usize) -> Result<()> {
    if text.len() > width || !text.is_ascii() {
        return Err(Error::Argument(format!(
            "header value {text:?} does not fit an ASCII field of {width} bytes"
        )));
    }
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
    Ok(())
}

/// Shortest decimal form of `v` that fits an 8-byte field.
pub(crate) fn format_number(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 8 {
        return s;
    }
    let int_digits = format!("{}", v.trunc() as i64).len();
    let decimals = 8usize.saturating_sub(int_digits + 1);
    let s = format!("{v:.decimals$}");
    s.trim_end_matches('0').trim_end_matches('.').chars().take(8).collect()
}

fn clock_seconds(date: &str, time: &str) -> Result<i64> {
    let parts = |s: &str| -> Option<[i64; 3]> {
        let v: Vec<i64> = s.trim().split(['.', ':']).filter_map(|p| p.parse().ok()).collect();
        (v.len() == 3).then(|| [v[0], v[1], v[2]])
    };
    let [d, m, y] = parts(date).ok_or_else(|| Error::parse(168, format!("bad start date {date:?}")))?;
    let [hh, mm, ss] = parts(time).ok_or_else(|| Error::parse(176, format!("bad start time {time:?}")))?;
    // two-digit years: 85-99 are 1985-1999, everything else 2000-2084
    let year = if y >= 85 { 1900 + y } else { 2000 + y };
    let days = days_from_civil(year, m, d) - days_from_civil(1985, 1, 1);
    Ok(days * 86_400 + hh * 3600 + mm * 60 + ss)
}

fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_truncated_at_zero() {
        match parse_edf_bytes(&[]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(-1.0), "-1");
        assert_eq!(format_number(0.5), "0.5");
        assert_eq!(format_number(30.0), "30");
        assert_eq!(format_number(1.0 / 3.0), "0.333333");
        assert_eq!(format_number(-187.5432189), "-187.543");
    }

    #[test]
    fn clock_difference() {
        let a = clock_seconds("16.04.89", "21.57.00").unwrap();
        let b = clock_seconds("17.04.89", "00.03.30").unwrap();
        assert_eq!(b - a, 2 * 3600 + 6 * 60 + 30);
        let later = clock_seconds("01.01.05", "00.00.00").unwrap();
        assert!(later > b);
    }
}
