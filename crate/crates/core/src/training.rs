//! Loss, subject-wise cross-validation, early stopping, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::ingest::{window_sequences, SleepEpochSequence, Window, CHANNELS, NUM_CLASSES};
use crate::metrics::{MetricsReport, PerClassF1};
use crate::model::{Forward, Model, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Real, Shape, Tensor};

pub const CLASS_WEIGHTS: [f64; NUM_CLASSES] = [1.0, 1.80, 1.0, 1.20, 1.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Loss weight per stage, in W, N1, N2, N3, REM order.
    pub class_weights: [f64; NUM_CLASSES],
    pub patience: usize,
    pub seed: u64,
    pub folds: usize,
    /// Standardize each channel with statistics of the training subjects.
    pub zscore: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 8,
            adam: AdamConfig {
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            class_weights: CLASS_WEIGHTS,
            patience: 5,
            seed: 0,
            folds: 20,
            zscore: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least 2 folds are required".into()));
        }
        if self.batch < 1 || self.epochs < 1 {
            return Err(Error::Config("batch size and epoch count must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `-w[y] ln p[y]` over unmasked rows of a (batch, len, classes)
/// distribution. With every row masked the loss is 0 and has zero gradient.
pub fn weighted_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    probs: &Var<T>,
    labels: &[usize],
    mask: &[bool],
    weights: &[f64; NUM_CLASSES],
) -> Result<Var<T>> {
    if labels.len() != mask.len() {
        return Err(Error::Shape(format!("{} labels for {} mask entries", labels.len(), mask.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::Argument(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    let rows: Vec<T> = labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| if m { T::lit(weights[y]) } else { T::zero() })
        .collect();
    g.weighted_nll(probs, labels, &rows)
}

/// Subjects assigned to one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    /// One subject taken from the training pool; empty when only one
    /// training subject is left.
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles the distinct subjects and splits them into `k` test groups whose
/// sizes differ by at most one.
pub fn subject_kfold(subjects: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut ids: Vec<String> = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if k < 2 {
        return Err(Error::Argument("k must be >= 2".into()));
    }
    if k > ids.len() {
        return Err(Error::Argument(format!("k = {k} exceeds the {} subjects", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for index in 0..k {
        let size = n / k + usize::from(index < n % k);
        let test: Vec<String> = ids[start..start + size].to_vec();
        let mut train: Vec<String> = ids[..start].iter().chain(&ids[start + size..]).cloned().collect();
        let val = if train.len() > 1 {
            // Rotate the validation pick so folds do not all validate on the same subject.
            vec![train.remove(index % train.len())]
        } else {
            Vec::new()
        };
        folds.push(Fold { index, train, val, test });
        start += size;
    }
    Ok(folds)
}

/// Windows of one fold, cut with stride `seq_len`.
#[derive(Debug, Clone)]
pub struct FoldWindows {
    pub train: Vec<Window>,
    /// The training windows when the fold has no validation subject.
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub val_is_train: bool,
    /// Standardization fitted on the training records, when requested.
    pub zscore: Option<ZScore>,
}

/// Splits `records` by the subjects of `fold`, checking that no subject
/// appears in two parts.
pub fn fold_windows(records: &[Record], fold: &Fold, seq_len: usize, zscore: bool) -> Result<FoldWindows> {
    for (a, an, b, bn) in [
        (&fold.train, "train", &fold.test, "test"),
        (&fold.val, "validation", &fold.test, "test"),
        (&fold.train, "train", &fold.val, "validation"),
    ] {
        if let Some(s) = a.iter().find(|s| b.contains(s)) {
            return Err(Error::Validation(format!(
                "fold {}: subject {s} is in both the {an} and {bn} sets",
                fold.index
            )));
        }
    }
    for s in fold.train.iter().chain(&fold.val).chain(&fold.test) {
        if !records.iter().any(|r| &r.subject == s) {
            return Err(Error::Validation(format!("fold {}: no recordings for subject {s}", fold.index)));
        }
    }
    let part = |subjects: &[String]| -> Vec<&SleepEpochSequence> {
        records
            .iter()
            .filter(|r| subjects.contains(&r.subject))
            .map(|r| &r.sequence)
            .collect()
    };
    let norm = zscore.then(|| ZScore::fit(part(&fold.train)));
    let cut = |subjects: &[String]| -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for seq in part(subjects) {
            for mut w in window_sequences(seq, seq_len, seq_len)? {
                if let Some(z) = &norm {
                    z.apply(&mut w);
                }
                out.push(w);
            }
        }
        Ok(out)
    };
    let train = cut(&fold.train)?;
    let val_is_train = fold.val.is_empty();
    let val = if val_is_train { train.clone() } else { cut(&fold.val)? };
    Ok(FoldWindows {
        train,
        val,
        test: cut(&fold.test)?,
        val_is_train,
        zscore: norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored metric has failed to strictly improve for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        self.seen += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = self.seen;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best metric.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-channel standardization fitted on training recordings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl ZScore {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a SleepEpochSequence>) -> Self {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut n = 0usize;
        for s in seqs {
            for pair in s.samples().chunks_exact(CHANNELS) {
                for c in 0..CHANNELS {
                    let v = pair[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let mut out = ZScore {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        };
        if n > 0 {
            for c in 0..CHANNELS {
                let m = sum[c] / n as f64;
                let var = (sq[c] / n as f64 - m * m).max(0.0);
                out.mean[c] = m as f32;
                out.std[c] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
            }
        }
        out
    }

    pub fn apply(&self, w: &mut Window) {
        for pair in w.input.chunks_exact_mut(CHANNELS) {
            for c in 0..CHANNELS {
                pair[c] = (pair[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Stacked windows ready for the model.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// (windows, seq_len * epoch_len, 2)
    pub input: Tensor<T>,
    /// Row-major (window, epoch) labels and padding mask.
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn from_windows(windows: &[&Window]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Argument("cannot build an empty batch".into()))?;
        let len = first.input.len() / CHANNELS;
        let mut data = Vec::with_capacity(windows.len() * first.input.len());
        let mut labels = Vec::new();
        let mut mask = Vec::new();
        for w in windows {
            if w.input.len() != first.input.len() || w.labels.len() != first.labels.len() {
                return Err(Error::Shape("windows in a batch differ in length".into()));
            }
            data.extend(w.input.iter().map(|&v| T::lit(v as f64)));
            labels.extend(w.labels.iter().map(|&l| l as usize));
            mask.extend_from_slice(&w.real);
        }
        Ok(Batch {
            input: Tensor::new(Shape::new(windows.len(), len, CHANNELS), data)?,
            labels,
            mask,
        })
    }
}

/// One Adam update on a batch; returns the loss before the update.
pub fn train_step<T: Real>(
    model: &Model,
    params: &mut ModelParams<T>,
    opt: &mut AdamState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, params, Mode::Train);
    let x = cx.graph.constant(batch.input.clone());
    let out = model.forward(&mut cx, &x)?;
    let loss = weighted_cross_entropy(cx.graph, &out.probs, &batch.labels, &batch.mask, &cfg.class_weights)?;
    let vars = cx.finish();
    let value = loss.value().item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = g.backward(&loss)?;
    let grads: Vec<Tensor<T>> = params
        .iter()
        .map(|(name, t)| match vars.get(name) {
            Some(v) => grads.get_or_zeros(v),
            None => Tensor::zeros(t.shape()),
        })
        .collect();
    opt.update(params.tensors_mut(), &grads, &cfg.adam)?;
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite after an update".into()));
    }
    Ok(value)
}

/// Eval-mode argmax per epoch for every window.
pub fn predict_windows<T: Real>(
    model: &Model,
    params: &mut ModelParams<T>,
    windows: &[Window],
    batch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let b = Batch::<T>::from_windows(&refs)?;
        let probs = model.predict(params, b.input)?;
        let preds = probs.argmax_channels();
        out.extend(preds.chunks(model.cfg.seq_len).map(<[usize]>::to_vec));
    }
    Ok(out)
}

/// Confusion and scores over the real (unpadded) epochs of `windows`.
pub fn evaluate<T: Real>(
    model: &Model,
    params: &mut ModelParams<T>,
    windows: &[Window],
    batch: usize,
) -> Result<MetricsReport> {
    let preds = predict_windows(model, params, windows, batch)?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (w, pw) in windows.iter().zip(&preds) {
        for ((&pred, &label), &real) in pw.iter().zip(&w.labels).zip(&w.real) {
            if real {
                p.push(pred);
                y.push(label as usize);
            }
        }
    }
    MetricsReport::from_predictions(&p, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub val_per_class_f1: PerClassF1,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation macro F1.
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub best_metrics: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn numeric_dump<T: Real>(err: Error, batch_index: usize, params: &ModelParams<T>) -> Error {
    let table: Vec<String> = params
        .norm_table()
        .into_iter()
        .map(|(n, v)| format!("  {n}: {v:.6e}"))
        .collect();
    Error::Numeric(format!(
        "{err} at batch {batch_index}; parameter norms:\n{}",
        table.join("\n")
    ))
}

/// Trains from `params`, shuffling windows each epoch, and keeps the
/// parameters with the best validation macro F1. `on_epoch` sees every
/// epoch record as soon as it is complete.
pub fn train<T: Real>(
    model: &Model,
    mut params: ModelParams<T>,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Argument("training and validation windows are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = None;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&Window> = idx.iter().map(|&i| &train_windows[i]).collect();
            let batch = Batch::from_windows(&refs)?;
            let loss = match train_step(model, &mut params, &mut opt, &batch, cfg) {
                Err(e @ Error::Numeric(_)) => return Err(numeric_dump(e, bi, &params)),
                other => other?,
            };
            total += loss;
            batches += 1;
        }
        let report = evaluate(model, &mut params, val_windows, cfg.batch)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_acc: report.accuracy,
            val_macro_f1: report.macro_f1,
            val_per_class_f1: report.per_class_f1.clone(),
        };
        on_epoch(&record)?;
        history.push(record);
        match stopper.observe(report.macro_f1) {
            StopDecision::Improved => best = Some((params.clone(), report)),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best, best_metrics) = best.expect("first epoch always improves");
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        best_metrics,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn uniform_n1_loss() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(Shape::new(1, 1, 5), 0.2));
        let loss = weighted_cross_entropy(&mut g, &p, &[1], &[true], &CLASS_WEIGHTS).unwrap();
        let want = 1.80 * -(0.2f64.ln());
        assert!((loss.value().item().unwrap() - want).abs() < 1e-12);
        assert!((want - 2.8970).abs() < 1e-3);
    }

    #[test]
    fn certain_and_masked_rows() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(Shape::new(1, 2, 5), &[0., 0., 1., 0., 0., 0.2, 0.2, 0.2, 0.2, 0.2]).unwrap());
        let loss = weighted_cross_entropy(&mut g, &p, &[2, 0], &[true, false], &CLASS_WEIGHTS).unwrap();
        assert_eq!(loss.value().item().unwrap(), 0.0);
        let none = weighted_cross_entropy(&mut g, &p, &[2, 0], &[false, false], &CLASS_WEIGHTS).unwrap();
        assert_eq!(none.value().item().unwrap(), 0.0);
        let grads = g.backward(&none).unwrap();
        assert!(grads.get_or_zeros(&p).data().iter().all(|v| *v == 0.0));
        assert!(weighted_cross_entropy(&mut g, &p, &[5, 0], &[true, true], &CLASS_WEIGHTS).is_err());
    }

    #[test]
    fn leave_one_subject_out() {
        let folds = subject_kfold(&names(20), 20, 7).unwrap();
        assert_eq!(folds.len(), 20);
        let mut tested: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort();
        assert_eq!(tested, names(20));
        for f in &folds {
            assert_eq!(f.test.len(), 1);
            assert_eq!(f.val.len(), 1);
            assert_eq!(f.train.len(), 18);
            assert!(!f.train.contains(&f.test[0]) && !f.train.contains(&f.val[0]));
        }
        assert_eq!(folds, subject_kfold(&names(20), 20, 7).unwrap());
        assert_ne!(folds, subject_kfold(&names(20), 20, 8).unwrap());
    }

    #[test]
    fn uneven_folds_and_duplicates() {
        let mut subjects = names(7);
        subjects.extend(names(7));
        let folds = subject_kfold(&subjects, 3, 0).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert!(subject_kfold(&names(3), 4, 0).is_err());
        assert!(subject_kfold(&names(3), 1, 0).is_err());
        let two = subject_kfold(&names(2), 2, 0).unwrap();
        assert!(two[0].val.is_empty() && two[0].train.len() == 1);
    }

    #[test]
    fn frozen_metric_stops_after_patience_plus_one() {
        let mut s = EarlyStopping::new(5);
        let decisions: Vec<_> = (0..10).map(|_| s.observe(0.5)).take_while(|d| *d != StopDecision::Stop).collect();
        assert_eq!(decisions.len() + 1, 6);
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(0.1), StopDecision::Improved);
        assert_eq!(s.observe(0.1), StopDecision::Continue);
        assert_eq!(s.observe(0.2), StopDecision::Improved);
        assert_eq!(s.observe(0.2), StopDecision::Continue);
        assert_eq!(s.observe(0.1), StopDecision::Stop);
        assert_eq!(s.best(), Some(0.2));
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.class_weights[1] = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { patience: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
