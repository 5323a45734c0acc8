//! Locating PSG / hypnogram pairs on disk, preparing them into epoch
//! caches, and the summary that indexes a cache directory.
//!
//! Sleep-EDF cassette files are named `SC4ssNxx-PSG.edf` and
//! `SC4ssNyy-Hypnogram.edf`, where `ss` is the subject and `N` the night.
//! The first six characters pair the two files. A `manifest.json` in the
//! data directory (or passed explicitly) overrides the naming convention.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edf::{parse_edf, parse_hypnogram};
use crate::error::{Error, Result};
use crate::ingest::{build_epochs, read_cache, write_cache, EpochConfig, SleepEpochSequence, NUM_CLASSES};

pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Published per-stage epoch counts of the 39-night cassette subset.
pub const SLEEP_EDF_39_COUNTS: [u64; NUM_CLASSES] = [8285, 2804, 17799, 5703, 7717];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "sleep-edf-39")]
    SleepEdf39,
    #[serde(rename = "sleep-edf-153")]
    SleepEdf153,
    #[serde(rename = "custom")]
    Custom,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::SleepEdf39, Dataset::SleepEdf153, Dataset::Custom];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::SleepEdf39 => "sleep-edf-39",
            Dataset::SleepEdf153 => "sleep-edf-153",
            Dataset::Custom => "custom",
        }
    }

    /// Whether a cassette subject number belongs to this dataset.
    fn includes_subject(self, number: u32) -> bool {
        match self {
            Dataset::SleepEdf39 => number < 20,
            _ => true,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset {s:?}; expected sleep-edf-39, sleep-edf-153 or custom")))
    }
}

/// The two files of one recorded night.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightFiles {
    pub night: String,
    pub subject: String,
    pub psg: PathBuf,
    pub hypnogram: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Discovery {
    pub nights: Vec<NightFiles>,
    /// (night or file, message) for every PSG that could not be paired.
    pub problems: Vec<(String, String)>,
}

fn is_edf(name: &str) -> bool {
    name.to_ascii_lowercase().ends_with(".edf")
}

/// (night id, subject id, subject number) from a cassette-style file name.
fn cassette_ids(name: &str) -> Option<(String, String, u32)> {
    let b = name.as_bytes();
    if b.len() < 6 || !name[..3].eq_ignore_ascii_case("SC4") {
        return None;
    }
    let number: u32 = name[3..5].parse().ok()?;
    b[5].is_ascii_digit().then(|| (name[..6].to_string(), name[..5].to_string(), number))
}

fn read_manifest(dir: &Path, path: &Path) -> Result<Discovery> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<NightFiles> = serde_json::from_str(&text)?;
    let mut out = Discovery::default();
    for mut e in entries {
        e.psg = dir.join(&e.psg);
        e.hypnogram = dir.join(&e.hypnogram);
        let missing: Vec<String> = [&e.psg, &e.hypnogram]
            .into_iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            out.nights.push(e);
        } else {
            out.problems.push((e.night.clone(), format!("missing {}", missing.join(", "))));
        }
    }
    Ok(out)
}

/// Finds every night under `dir`. With no manifest, `custom` pairs
/// `<stem>-PSG.edf` with `<stem>-Hypnogram.edf` and treats each stem as
/// its own subject.
pub fn discover(dir: &Path, dataset: Dataset, manifest: Option<&Path>) -> Result<Discovery> {
    let default_manifest = dir.join(MANIFEST_FILE);
    if let Some(m) = manifest {
        return read_manifest(dir, m);
    }
    if default_manifest.is_file() {
        return read_manifest(dir, &default_manifest);
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| is_edf(n))
        .collect();
    names.sort();
    let hypnograms: Vec<&String> = names
        .iter()
        .filter(|n| n.to_ascii_lowercase().contains("hypnogram"))
        .collect();

    let mut out = Discovery::default();
    for psg in names.iter().filter(|n| n.to_ascii_lowercase().contains("-psg")) {
        let stem = &psg[..psg.to_ascii_lowercase().find("-psg").unwrap()];
        let (night, subject, key) = match (dataset, cassette_ids(stem)) {
            (Dataset::Custom, _) => (stem.to_string(), stem.to_string(), stem.to_string()),
            (_, Some((night, subject, number))) => {
                if !dataset.includes_subject(number) {
                    continue;
                }
                (night.clone(), subject, night)
            }
            (_, None) => {
                out.problems.push((psg.clone(), "file name does not follow the SC4ssN pattern".into()));
                continue;
            }
        };
        let matches: Vec<&&String> = hypnograms
            .iter()
            .filter(|h| match dataset {
                Dataset::Custom => h.to_ascii_lowercase() == format!("{}-hypnogram.edf", key.to_ascii_lowercase()),
                _ => h.len() >= key.len() && h[..key.len()].eq_ignore_ascii_case(&key),
            })
            .collect();
        match matches.as_slice() {
            [h] => out.nights.push(NightFiles {
                night,
                subject,
                psg: dir.join(psg),
                hypnogram: dir.join(h.as_str()),
            }),
            [] => out.problems.push((night, format!("no hypnogram found for {psg}"))),
            many => out.problems.push((
                night,
                format!(
                    "several hypnograms match {psg}: {}",
                    many.iter().map(|h| h.as_str()).collect::<Vec<_>>().join(", ")
                ),
            )),
        }
    }
    Ok(out)
}

/// Parses one night and cuts it into labelled epochs.
pub fn prepare_night(files: &NightFiles, cfg: &EpochConfig) -> Result<SleepEpochSequence> {
    let rec = parse_edf(&files.psg)?;
    let intervals = parse_hypnogram(&files.hypnogram)?;
    build_epochs(&files.night, &rec, &intervals, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    #[serde(rename = "W")]
    pub w: u64,
    #[serde(rename = "N1")]
    pub n1: u64,
    #[serde(rename = "N2")]
    pub n2: u64,
    #[serde(rename = "N3")]
    pub n3: u64,
    #[serde(rename = "REM")]
    pub rem: u64,
}

impl ClassCounts {
    pub fn as_array(&self) -> [u64; NUM_CLASSES] {
        [self.w, self.n1, self.n2, self.n3, self.rem]
    }

    pub fn total(&self) -> u64 {
        self.as_array().iter().sum()
    }
}

impl From<[u64; NUM_CLASSES]> for ClassCounts {
    fn from(a: [u64; NUM_CLASSES]) -> Self {
        ClassCounts {
            w: a[0],
            n1: a[1],
            n2: a[2],
            n3: a[3],
            rem: a[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightSummary {
    pub night: String,
    pub subject: String,
    /// Cache file name, relative to the cache directory.
    pub cache_file: String,
    pub epochs: u64,
    pub class_counts: ClassCounts,
}

/// Prepared counts next to published ones, with `deviation = ours - published`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountComparison {
    pub published: ClassCounts,
    pub published_total: u64,
    pub deviation: [i64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub dataset: Dataset,
    pub epoch_config: EpochConfig,
    pub nights: Vec<NightSummary>,
    pub class_counts: ClassCounts,
    pub total_epochs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<CountComparison>,
}

impl CacheSummary {
    pub fn new(dataset: Dataset, epoch_config: EpochConfig, mut nights: Vec<NightSummary>) -> Self {
        nights.sort_by(|a, b| a.night.cmp(&b.night));
        let mut totals = [0u64; NUM_CLASSES];
        for n in &nights {
            for (t, c) in totals.iter_mut().zip(n.class_counts.as_array()) {
                *t += c;
            }
        }
        let class_counts = ClassCounts::from(totals);
        let comparison = (dataset == Dataset::SleepEdf39).then(|| {
            let published = ClassCounts::from(SLEEP_EDF_39_COUNTS);
            let mut deviation = [0i64; NUM_CLASSES];
            for (d, (ours, theirs)) in deviation.iter_mut().zip(totals.iter().zip(SLEEP_EDF_39_COUNTS)) {
                *d = *ours as i64 - theirs as i64;
            }
            CountComparison {
                published_total: published.total(),
                published,
                deviation,
            }
        });
        CacheSummary {
            dataset,
            epoch_config,
            total_epochs: class_counts.total(),
            class_counts,
            nights,
            comparison,
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.nights.iter().map(|n| n.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn load(cache_dir: &Path) -> Result<Self> {
        let path = cache_dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn night(&self, id: &str) -> Option<&NightSummary> {
        self.nights.iter().find(|n| n.night == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareReport {
    /// Present only when every night was prepared.
    pub summary: Option<CacheSummary>,
    pub failures: Vec<(String, String)>,
}

pub fn cache_file_name(night: &str) -> String {
    format!("{night}.ssnp")
}

/// Prepares every discovered night into `cache_dir`, up to `threads` at a
/// time. Any failure (including unpaired files) removes the caches written by
/// this call and leaves no summary, so a cache directory is either complete
/// or untouched.
pub fn prepare_dataset(
    found: &Discovery,
    dataset: Dataset,
    cache_dir: &Path,
    cfg: &EpochConfig,
    threads: usize,
) -> Result<PrepareReport> {
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let threads = threads.max(1);
    let mut results: Vec<(usize, Result<NightSummary>)> = Vec::new();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads.min(found.nights.len().max(1)))
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(files) = found.nights.get(i) else { break };
                        local.push((i, prepare_one(files, cache_dir, cfg)));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            results.extend(h.join().expect("preparation worker panicked"));
        }
    });
    results.sort_by_key(|(i, _)| *i);

    let mut failures = found.problems.clone();
    let mut nights = Vec::new();
    for (i, r) in results {
        match r {
            Ok(s) => nights.push(s),
            Err(e) => failures.push((found.nights[i].night.clone(), e.to_string())),
        }
    }
    if found.nights.is_empty() && failures.is_empty() {
        failures.push((cache_dir.display().to_string(), "no recordings found".into()));
    }
    if !failures.is_empty() {
        for n in &nights {
            let _ = std::fs::remove_file(cache_dir.join(&n.cache_file));
        }
        return Ok(PrepareReport {
            summary: None,
            failures,
        });
    }
    let summary = CacheSummary::new(dataset, cfg.clone(), nights);
    let path = cache_dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(PrepareReport {
        summary: Some(summary),
        failures,
    })
}

fn prepare_one(files: &NightFiles, cache_dir: &Path, cfg: &EpochConfig) -> Result<NightSummary> {
    let seq = prepare_night(files, cfg)?;
    let cache_file = cache_file_name(&files.night);
    write_cache(cache_dir.join(&cache_file), &seq)?;
    let counts = seq.class_counts().map(|c| c as u64);
    Ok(NightSummary {
        night: files.night.clone(),
        subject: files.subject.clone(),
        cache_file,
        epochs: seq.len() as u64,
        class_counts: counts.into(),
    })
}

/// A cached night together with its subject.
#[derive(Debug, Clone)]
pub struct Record {
    pub subject: String,
    pub sequence: SleepEpochSequence,
}

/// Reads the caches of the given subjects, in summary order.
pub fn load_records(cache_dir: &Path, summary: &CacheSummary, subjects: &[String]) -> Result<Vec<Record>> {
    summary
        .nights
        .iter()
        .filter(|n| subjects.contains(&n.subject))
        .map(|n| {
            let sequence = read_cache(cache_dir.join(&n.cache_file), &n.night)?;
            if sequence.len() as u64 != n.epochs {
                return Err(Error::Validation(format!(
                    "{}: cache holds {} epochs but the summary lists {}",
                    n.night,
                    sequence.len(),
                    n.epochs
                )));
            }
            Ok(Record {
                subject: n.subject.clone(),
                sequence,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cassette_names() {
        assert_eq!(
            cassette_ids("SC4001E0"),
            Some(("SC4001".to_string(), "SC400".to_string(), 0))
        );
        assert_eq!(cassette_ids("SC4192E0").unwrap().2, 19);
        assert_eq!(cassette_ids("ST7011J0"), None);
        assert!(!Dataset::SleepEdf39.includes_subject(20));
        assert!(Dataset::SleepEdf153.includes_subject(82));
    }

    #[test]
    fn dataset_names_round_trip() {
        for d in Dataset::ALL {
            assert_eq!(d.as_str().parse::<Dataset>().unwrap(), d);
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{d}\""));
        }
        assert!("edf-20".parse::<Dataset>().is_err());
    }

    #[test]
    fn summary_totals_and_comparison() {
        let night = |id: &str, subject: &str, c: [u64; 5]| NightSummary {
            night: id.into(),
            subject: subject.into(),
            cache_file: cache_file_name(id),
            epochs: c.iter().sum(),
            class_counts: c.into(),
        };
        let s = CacheSummary::new(
            Dataset::SleepEdf39,
            EpochConfig::default(),
            vec![night("SC4012", "SC401", [1, 2, 3, 4, 5]), night("SC4001", "SC400", [10, 0, 0, 0, 1])],
        );
        assert_eq!(s.nights[0].night, "SC4001");
        assert_eq!(s.class_counts.as_array(), [11, 2, 3, 4, 6]);
        assert_eq!(s.total_epochs, 26);
        let c = s.comparison.as_ref().unwrap();
        assert_eq!(c.published_total, 42308);
        assert_eq!(c.deviation[2], 3 - 17799);
        assert_eq!(s.subjects(), vec!["SC400".to_string(), "SC401".to_string()]);
        let back: CacheSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(CacheSummary::new(Dataset::Custom, EpochConfig::default(), vec![]).comparison.is_none());
    }
}
