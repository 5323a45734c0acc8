//! EDF+ time-stamped annotation lists (TALs).
//!
//! A TAL is `[+-]onset[\x15duration]\x14text\x14...text\x14\x00`. The first TAL
//! of each record is a timekeeping entry with an empty text list.

use std::path::Path;

use crate::error::{Error, Result};

const DURATION_MARK: u8 = 0x15;
const TEXT_MARK: u8 = 0x14;

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub onset: f64,
    pub duration: Option<f64>,
    pub text: String,
}

/// Decodes every annotation in one record's annotation-signal bytes.
/// `base_offset` is the file offset of `bytes`, used in error messages.
pub fn parse_tals(bytes: &[u8], base_offset: usize) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == 0)
            .map_or(bytes.len(), |p| start + p);
        let tal = &bytes[start..end];
        if !tal.is_empty() {
            parse_one(tal, base_offset + start, &mut out)?;
        }
        start = end + 1;
    }
    Ok(out)
}

fn parse_one(tal: &[u8], offset: usize, out: &mut Vec<Annotation>) -> Result<()> {
    let mut fields = tal.split(|&b| b == TEXT_MARK);
    let stamp = fields.next().unwrap_or_default();
    let (onset_raw, duration_raw) = match stamp.iter().position(|&b| b == DURATION_MARK) {
        Some(p) => (&stamp[..p], Some(&stamp[p + 1..])),
        None => (stamp, None),
    };
    let num = |raw: &[u8], what: &str| -> Result<f64> {
        std::str::from_utf8(raw)
            .ok()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::parse(
                    offset,
                    format!("TAL {what} is not a number: {:?}", String::from_utf8_lossy(raw)),
                )
            })
    };
    if !matches!(onset_raw.first(), Some(b'+') | Some(b'-')) {
        return Err(Error::parse(offset, "TAL onset must start with '+' or '-'"));
    }
    let onset = num(onset_raw, "onset")?;
    let duration = duration_raw.map(|d| num(d, "duration")).transpose()?;
    for text in fields {
        if text.is_empty() {
            continue;
        }
        out.push(Annotation {
            onset,
            duration,
            text: String::from_utf8_lossy(text).into_owned(),
        });
    }
    Ok(())
}

/// Encodes one annotation as a TAL, including its trailing zero byte.
pub fn encode_tal(onset: f64, duration: Option<f64>, texts: &[&str]) -> Vec<u8> {
    let mut out = Vec::new();
    let sign = if onset < 0.0 { "-" } else { "+" };
    out.extend_from_slice(format!("{sign}{}", onset.abs()).as_bytes());
    if let Some(d) = duration {
        out.push(DURATION_MARK);
        out.extend_from_slice(format!("{d}").as_bytes());
    }
    out.push(TEXT_MARK);
    if texts.is_empty() {
        out.push(TEXT_MARK);
    }
    for t in texts {
        out.extend_from_slice(t.as_bytes());
        out.push(TEXT_MARK);
    }
    out.push(0);
    out
}

/// A scored interval of a hypnogram.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInterval {
    pub onset: f64,
    pub duration: f64,
    pub text: String,
}

/// Orders annotations by onset and checks they form non-overlapping intervals.
/// Stage text is passed through unchanged.
pub fn stage_intervals(annotations: &[Annotation]) -> Result<Vec<StageInterval>> {
    let mut out: Vec<StageInterval> = annotations
        .iter()
        .map(|a| {
            let duration = a.duration.ok_or_else(|| {
                Error::Validation(format!(
                    "hypnogram annotation {:?} at {}s has no duration",
                    a.text, a.onset
                ))
            })?;
            Ok(StageInterval {
                onset: a.onset,
                duration,
                text: a.text.clone(),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    for pair in out.windows(2) {
        if pair[1].onset < pair[0].onset + pair[0].duration - 1e-6 {
            return Err(Error::Validation(format!(
                "hypnogram intervals overlap: {:?} at {}s (+{}s) and {:?} at {}s",
                pair[0].text, pair[0].onset, pair[0].duration, pair[1].text, pair[1].onset
            )));
        }
    }
    Ok(out)
}

pub fn parse_hypnogram(path: impl AsRef<Path>) -> Result<Vec<StageInterval>> {
    let rec = super::parse_edf(path)?;
    stage_intervals(&rec.annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stage_tal() {
        let a = parse_tals(b"+0\x15300\x14Sleep stage W\x14\x00", 0).unwrap();
        assert_eq!(
            a,
            vec![Annotation {
                onset: 0.0,
                duration: Some(300.0),
                text: "Sleep stage W".into()
            }]
        );
    }

    #[test]
    fn timekeeping_tal_and_padding_are_skipped() {
        let mut bytes = b"+0\x14\x14\x00+30\x1530\x14Sleep stage 1\x14\x00".to_vec();
        bytes.extend([0u8; 7]);
        let a = parse_tals(&bytes, 0).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].onset, 30.0);
    }

    #[test]
    fn multiple_texts_share_a_stamp() {
        let a = parse_tals(b"+12.5\x14A\x14B\x14\x00", 0).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].text, "B");
        assert_eq!(a[1].duration, None);
    }

    #[test]
    fn malformed_onset_reports_offset() {
        match parse_tals(b"\x00\x0012\x14x\x14\x00", 100) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 102),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_round_trips() {
        let bytes = encode_tal(90.0, Some(30.0), &["Sleep stage R"]);
        let a = parse_tals(&bytes, 0).unwrap();
        assert_eq!(a[0].text, "Sleep stage R");
        assert_eq!(a[0].duration, Some(30.0));
        assert_eq!(encode_tal(0.0, None, &[]), b"+0\x14\x14\x00");
    }

    #[test]
    fn intervals_are_ordered_and_checked() {
        let ann = |onset: f64, d: f64, t: &str| Annotation {
            onset,
            duration: Some(d),
            text: t.into(),
        };
        let ok = stage_intervals(&[ann(300.0, 60.0, "b"), ann(0.0, 300.0, "a")]).unwrap();
        assert_eq!(ok[0].text, "a");
        assert_eq!(ok[1].onset, ok[0].onset + ok[0].duration);
        assert!(stage_intervals(&[]).unwrap().is_empty());
        let err = stage_intervals(&[ann(0.0, 300.0, "a"), ann(270.0, 30.0, "b")]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
