use std::path::PathBuf;

use salientsleep::dataset::{discover, prepare_dataset, Dataset};
use salientsleep::ingest::{EpochConfig, STAGE_NAMES};
use salientsleep::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    /// Directory holding the PSG and hypnogram EDF files.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, env = "SSN_CACHE_DIR")]
    cache_dir: PathBuf,
    #[arg(long, default_value = "sleep-edf-39")]
    dataset: Dataset,
    /// JSON list of {night, subject, psg, hypnogram} entries, paths relative
    /// to --data-dir. Defaults to manifest.json in --data-dir when present.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Files parsed in parallel.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..=4))]
    threads: u16,
    #[arg(long, default_value = "Fpz-Cz")]
    eeg_channel: String,
    #[arg(long, default_value = "horizontal")]
    eog_channel: String,
    /// Wake epochs kept on each side of the sleep period.
    #[arg(long, default_value_t = 60)]
    wake_margin: usize,
}

pub fn run(a: Args) -> Result<()> {
    let cfg = EpochConfig {
        eeg_channel: a.eeg_channel,
        eog_channel: a.eog_channel,
        wake_margin_epochs: a.wake_margin,
        ..EpochConfig::default()
    };
    let found = discover(&a.data_dir, a.dataset, a.manifest.as_deref())?;
    let report = prepare_dataset(&found, a.dataset, &a.cache_dir, &cfg, a.threads as usize)?;
    let Some(summary) = report.summary else {
        eprintln!("{} recording(s) failed; no cache was kept:", report.failures.len());
        for (night, msg) in &report.failures {
            eprintln!("  {night}: {msg}");
        }
        return Err(Error::Validation(format!(
            "preparation of {} failed",
            report.failures.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
        )));
    };
    for n in &summary.nights {
        println!("{:<12} subject {:<8} {:>5} epochs", n.night, n.subject, n.epochs);
    }
    let counts = summary.class_counts.as_array();
    let line: Vec<String> = STAGE_NAMES.iter().zip(counts).map(|(s, c)| format!("{s} {c}")).collect();
    println!(
        "{} nights, {} subjects, {} epochs: {}",
        summary.nights.len(),
        summary.subjects().len(),
        summary.total_epochs,
        line.join(", ")
    );
    if let Some(c) = &summary.comparison {
        let dev: Vec<String> = STAGE_NAMES.iter().zip(c.deviation).map(|(s, d)| format!("{s} {d:+}")).collect();
        println!("reference total {}; deviation {}", c.published_total, dev.join(", "));
    }
    Ok(())
}
