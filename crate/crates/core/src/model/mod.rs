//! The two-stream sleep staging network.
//!
//! Each modality runs through its own stream: five encoder blocks separated
//! by max-pooling and four decoder blocks that upsample and concatenate a
//! skip connection. Skips pass through a multi-scale extraction block first.
//! The two stream outputs are fused with channel attention and classified
//! epoch by epoch.

mod checkpoint;
mod config;
pub mod layers;
mod params;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{BatchNormConfig, Graph, Mode, PoolMode, Var};
use crate::tensor::{Real, Shape};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Variant};
pub use layers::{fuse, Block, Classifier, Conv, ConvBnRelu, Dense, Mma, Mse, PlainUnit, UUnit};
pub use params::{Init, ModelParams, ParamCount, ParamSpec, Specs};

/// Per-call state for running layers: the graph, the parameter store, and
/// the graph variables already created for each parameter.
pub struct Forward<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    params: &'a mut ModelParams<T>,
    mode: Mode,
    bn: BatchNormConfig,
    vars: IndexMap<String, Var<T>>,
    trace: Option<Vec<(String, Shape)>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ModelParams<T>, mode: Mode) -> Self {
        Forward {
            graph,
            params,
            mode,
            bn: BatchNormConfig::default(),
            vars: IndexMap::new(),
            trace: None,
        }
    }

    /// Uses the given variables for the named parameters instead of fresh
    /// leaves, e.g. those supplied by a gradient check.
    pub fn bind(mut self, names: &[String], vars: &[Var<T>]) -> Self {
        for (n, v) in names.iter().zip(vars) {
            self.vars.insert(n.clone(), v.clone());
        }
        self
    }

    /// Records the shape of every block output.
    pub fn traced(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&mut self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.clone());
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} is not defined")))?
            .clone();
        let v = self.graph.param(t);
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn batch_norm(&mut self, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let stats = self
            .params
            .norm_mut(name)
            .ok_or_else(|| Error::Config(format!("running stats {name} are not defined")))?;
        self.graph.batch_norm(x, &gamma, &beta, stats, self.mode, self.bn)
    }

    pub fn record(&mut self, name: impl FnOnce() -> String, shape: Shape) {
        if let Some(t) = &mut self.trace {
            t.push((name(), shape));
        }
    }

    /// Parameter variables in the order they were first used.
    pub fn vars(&self) -> &IndexMap<String, Var<T>> {
        &self.vars
    }

    pub fn take_trace(&mut self) -> Vec<(String, Shape)> {
        self.trace.take().unwrap_or_default()
    }

    /// Hands back the parameter variables, ending the borrow of the graph.
    pub fn finish(self) -> IndexMap<String, Var<T>> {
        self.vars
    }
}

/// One single-modality encoder-decoder.
#[derive(Debug, Clone)]
pub struct Stream {
    pub name: String,
    pub encoders: Vec<Block>,
    pub pools: Vec<usize>,
    /// One per skip connection, shallowest first; empty without multi-scale extraction.
    pub mse: Vec<Mse>,
    /// Indexed by level, so `decoders[0]` produces the stream output.
    pub decoders: Vec<Block>,
}

impl Stream {
    pub fn new(name: &str, cfg: &ModelConfig) -> Result<Self> {
        let v = cfg.variant;
        let k = cfg.kernel;
        let block = |label: String, cin: usize, cout: usize| {
            let full = format!("{name}.{label}");
            if v.nested() {
                Block::Nested(UUnit::new(&full, k, cin, cfg.mid_channels(cout), cout, cfg.depth))
            } else {
                Block::Basic(PlainUnit::new(&full, k, cin, cfg.mid_channels(cout), cout))
            }
        };
        let f = &cfg.filters;
        let levels = f.len();
        let mut encoders = Vec::with_capacity(levels);
        let mut cin = 1;
        for (i, &c) in f.iter().enumerate() {
            encoders.push(block(format!("enc{i}"), cin, c));
            cin = c;
        }
        let mut mse = Vec::new();
        if v.multi_scale() {
            for (i, &c) in f[..levels - 1].iter().enumerate() {
                let pointwise = v != Variant::NoBottleneck;
                mse.push(Mse::new(
                    &format!("{name}.mse{i}"),
                    c,
                    k,
                    &cfg.dilations,
                    cfg.bottleneck_rate,
                    pointwise,
                )?);
            }
        }
        let mut decoders: Vec<Option<Block>> = vec![None; levels - 1];
        let mut prev = f[levels - 1];
        for j in (0..levels - 1).rev() {
            let skip = mse.get(j).map_or(f[j], Mse::out_channels);
            decoders[j] = Some(block(format!("dec{j}"), prev + skip, f[j]));
            prev = f[j];
        }
        Ok(Stream {
            name: name.to_string(),
            encoders,
            pools: cfg.pools.clone(),
            mse,
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn collect(&self, s: &mut Specs) {
        for e in &self.encoders {
            e.collect(s);
        }
        for m in &self.mse {
            m.collect(s);
        }
        for d in self.decoders.iter().rev() {
            d.collect(s);
        }
    }

    /// (batch, len, 1) to (batch, len, filters[0]).
    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut skips = Vec::with_capacity(self.decoders.len());
        let mut cur = x.clone();
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                cur = cx.graph.pool1d(&cur, self.pools[i - 1], PoolMode::Max)?;
            }
            cur = enc.forward(cx, &cur)?;
            cx.record(|| format!("{}.enc{i}", self.name), cur.shape());
            if i < self.decoders.len() {
                skips.push(cur.clone());
            }
        }
        for j in (0..self.decoders.len()).rev() {
            let skip = match self.mse.get(j) {
                Some(m) => m.forward(cx, &skips[j])?,
                None => skips[j].clone(),
            };
            let up = cx.graph.upsample_linear(&cur, skip.shape().len)?;
            let cat = cx.graph.concat_channels(&[&up, &skip])?;
            cur = self.decoders[j].forward(cx, &cat)?;
            cx.record(|| format!("{}.dec{j}", self.name), cur.shape());
        }
        Ok(cur)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Attention(Mma),
    Concat,
}

/// Outputs of a full forward pass.
pub struct ModelOutput<T> {
    /// (batch, seq_len, classes) class distributions.
    pub probs: Var<T>,
    /// Stream outputs before fusion, (batch, len, filters[0]) each.
    pub eeg: Var<T>,
    pub eog: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub eeg: Stream,
    pub eog: Stream,
    pub fusion: Fusion,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let fusion = if cfg.variant.attention() {
            Fusion::Attention(Mma::new("mma", cfg.stream_channels(), cfg.attention_ratio))
        } else {
            Fusion::Concat
        };
        let classifier = Classifier {
            epoch_len: cfg.epoch_len,
            seq_len: cfg.seq_len,
            conv: Conv::new("classifier".into(), 1, cfg.fused_channels(), cfg.classes),
        };
        Ok(Model {
            eeg: Stream::new("eeg", &cfg)?,
            eog: Stream::new("eog", &cfg)?,
            fusion,
            classifier,
            cfg,
        })
    }

    pub fn specs(&self) -> Specs {
        let mut s = Specs::default();
        self.eeg.collect(&mut s);
        self.eog.collect(&mut s);
        if let Fusion::Attention(m) = &self.fusion {
            m.collect(&mut s);
        }
        self.classifier.collect(&mut s);
        s
    }

    pub fn count_parameters(&self) -> ParamCount {
        self.specs().breakdown()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ModelParams<T> {
        ModelParams::init(&self.specs(), seed)
    }

    /// (batch, seq_len * epoch_len, 2) with EEG in channel 0 and EOG in channel 1.
    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, input: &Var<T>) -> Result<ModelOutput<T>> {
        let s = input.shape();
        if s.channels != 2 {
            return Err(Error::Shape(format!(
                "model input needs 2 channels (EEG, EOG), got {}",
                s.channels
            )));
        }
        if s.len != self.cfg.input_len() {
            return Err(Error::Shape(format!(
                "model input length {} does not match {} epochs of {} samples",
                s.len, self.cfg.seq_len, self.cfg.epoch_len
            )));
        }
        let eeg_in = cx.graph.slice_channels(input, 0, 1)?;
        let eog_in = cx.graph.slice_channels(input, 1, 1)?;
        let eeg = self.eeg.forward(cx, &eeg_in)?;
        let eog = self.eog.forward(cx, &eog_in)?;
        let fused = match &self.fusion {
            Fusion::Attention(m) => m.forward(cx, &eeg, &eog)?,
            Fusion::Concat => cx.graph.concat_channels(&[&eeg, &eog])?,
        };
        let probs = self.classifier.forward(cx, &fused)?;
        Ok(ModelOutput { probs, eeg, eog })
    }

    /// Eval-mode class distributions without recording a graph.
    pub fn predict<T: Real>(&self, params: &mut ModelParams<T>, input: crate::Tensor<T>) -> Result<crate::Tensor<T>> {
        self.predict_in(params, input, Mode::Eval)
    }

    /// Class distributions in the given mode. Train mode normalizes with
    /// batch statistics and updates the running statistics in `params`.
    pub fn predict_in<T: Real>(
        &self,
        params: &mut ModelParams<T>,
        input: crate::Tensor<T>,
        mode: Mode,
    ) -> Result<crate::Tensor<T>> {
        let mut g = Graph::inference();
        let mut cx = Forward::new(&mut g, params, mode);
        let x = cx.graph.constant(input);
        let out = self.forward(&mut cx, &x)?;
        Ok(out.probs.value().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn full_size_counts() {
        let full = Model::new(ModelConfig::default()).unwrap().count_parameters().total;
        let nb = Model::new(ModelConfig::default().with_variant(Variant::NoBottleneck))
            .unwrap()
            .count_parameters()
            .total;
        assert_eq!(full, 922_265);
        assert_eq!(nb, 1_096_345);
    }

    #[test]
    fn toy_forward_shapes() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut params = model.init_params::<f64>(1);
        let mut g = Graph::new();
        let mut cx = Forward::new(&mut g, &mut params, Mode::Train).traced();
        let x = cx.graph.constant(Tensor::full(Shape::new(2, 200, 2), 0.5));
        let out = model.forward(&mut cx, &x).unwrap();
        assert_eq!(out.probs.shape(), Shape::new(2, 2, 5));
        assert_eq!(out.eeg.shape(), Shape::new(2, 200, 4));
        let trace = cx.take_trace();
        let enc: Vec<usize> = trace
            .iter()
            .filter(|(n, _)| n.starts_with("eeg.enc"))
            .map(|(_, s)| s.len)
            .collect();
        assert_eq!(enc, vec![200, 100, 50, 25, 13]);
        assert_eq!(cx.vars().len(), model.specs().params.len());
    }

    #[test]
    fn every_variant_builds() {
        for v in Variant::ALL {
            let model = Model::new(ModelConfig::toy().with_variant(v)).unwrap();
            let mut params = model.init_params::<f32>(0);
            let probs = model
                .predict(&mut params, Tensor::zeros(Shape::new(1, 200, 2)))
                .unwrap();
            assert_eq!(probs.shape(), Shape::new(1, 2, 5), "{v}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut params = model.init_params::<f32>(0);
        assert!(model.predict(&mut params, Tensor::zeros(Shape::new(1, 200, 3))).is_err());
        assert!(model.predict(&mut params, Tensor::zeros(Shape::new(1, 150, 2))).is_err());
    }
}
