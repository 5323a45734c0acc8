use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use salientsleep::dataset::CacheSummary;
use salientsleep::ingest::{read_cache, window_sequences, SleepEpochSequence, CHANNELS, EPOCH_SAMPLES};
use salientsleep::model::{load_checkpoint, Forward, Model, Variant};
use salientsleep::training::Batch;
use salientsleep::{Error, Graph, Mode, Result, Tensor};

use crate::run::{RunManifest, MANIFEST};
use crate::{io_err, read_json, Scale};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Night id as listed in the cache summary, e.g. SC4001.
    #[arg(long)]
    record: String,
    /// Half-open epoch range `a:b` within the night.
    #[arg(long, value_parser = parse_range)]
    epoch_range: (usize, usize),
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "SSN_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Used only when no run manifest sits beside the checkpoint.
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected a:b")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok((a, b))
}

pub fn run(a: Args) -> Result<()> {
    let manifest_path = a.checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    let manifest: Option<RunManifest> = if manifest_path.is_file() {
        Some(read_json(&manifest_path)?)
    } else {
        None
    };
    let cfg = match &manifest {
        Some(m) => m.model.clone(),
        None => a.scale.config(a.variant),
    };
    let cache = a
        .cache_dir
        .or_else(|| manifest.as_ref().map(|m| m.cache_dir.clone()))
        .ok_or_else(|| Error::Argument("--cache-dir is required without a run manifest".into()))?;
    let model = Model::new(cfg)?;
    let mut params = load_checkpoint(&a.checkpoint, &model)?;

    let summary = CacheSummary::load(&cache)?;
    let night = summary
        .night(&a.record)
        .ok_or_else(|| Error::Argument(format!("{} is not in the cache at {}", a.record, cache.display())))?;
    let seq = read_cache(cache.join(&night.cache_file), &night.subject)?;
    let (start, end) = a.epoch_range;
    if end > seq.len() {
        return Err(Error::Argument(format!(
            "epoch range {start}:{end} exceeds the {} epochs of {}",
            seq.len(),
            a.record
        )));
    }
    let per_epoch = EPOCH_SAMPLES * CHANNELS;
    let raw = &seq.samples()[start * per_epoch..end * per_epoch];
    let part = SleepEpochSequence::new(night.subject.clone(), seq.labels()[start..end].to_vec(), raw.to_vec())?;
    let seq_len = model.cfg.seq_len;
    let mut windows = window_sequences(&part, seq_len, seq_len)?;
    if let Some(z) = manifest.as_ref().and_then(|m| m.zscore) {
        windows.iter_mut().for_each(|w| z.apply(w));
    }

    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut writers = Vec::new();
    for name in ["saliency_eeg.csv", "saliency_eog.csv"] {
        let path = a.out.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let acts: Vec<String> = (0..model.cfg.filters[0]).map(|c| format!("act_{c}")).collect();
        writeln!(w, "sample,input,{},saliency", acts.join(",")).map_err(io_err(&path))?;
        writers.push((path, w));
    }
    for window in &windows {
        let batch = Batch::<f32>::from_windows(&[window])?;
        let (eeg, eog) = stream_maps(&model, &mut params, batch.input)?;
        let real_rows = window.real_count() * EPOCH_SAMPLES;
        for (ch, (map, (path, w))) in [eeg, eog].iter().zip(writers.iter_mut()).enumerate() {
            let c = map.shape().channels;
            for (t, row) in map.data().chunks(c).take(real_rows).enumerate() {
                let local = window.start_epoch * EPOCH_SAMPLES + t;
                let sample = start * EPOCH_SAMPLES + local;
                let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
                let mut line = format!("{sample},{}", raw[local * CHANNELS + ch]);
                for v in row {
                    line += &format!(",{v}");
                }
                writeln!(w, "{line},{norm}").map_err(io_err(path))?;
            }
        }
    }
    for (path, mut w) in writers {
        w.flush().map_err(io_err(&path))?;
    }
    println!(
        "wrote {} rows per stream for {} epochs {start}:{end} to {}",
        (end - start) * EPOCH_SAMPLES,
        a.record,
        a.out.display()
    );
    Ok(())
}

/// Eval-mode stream outputs, (1, seq_len * epoch_len, filters) each.
fn stream_maps(
    model: &Model,
    params: &mut salientsleep::model::ModelParams<f32>,
    input: Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::inference();
    let mut cx = Forward::new(&mut g, params, Mode::Eval);
    let x = cx.graph.constant(input);
    let out = model.forward(&mut cx, &x)?;
    Ok((out.eeg.value().clone(), out.eog.value().clone()))
}
