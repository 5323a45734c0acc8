//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation whose inputs require gradients. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse. Values live
//! behind `Rc`, which lets an inference graph (no recording) free activations
//! as soon as the last [`Var`] referencing them is dropped.
//!
//! Graphs are single-threaded. Run independent graphs for parallelism.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value produced in a [`Graph`].
#[derive(Debug, Clone)]
pub struct Var<T> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.99,
            eps: 1e-3,
        }
    }
}

/// Running batch-norm statistics, updated in train mode and consumed in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
        dilation: usize,
    },
    Pool {
        x: usize,
        in_shape: Shape,
        k: usize,
        // Source position for each output element (max mode only).
        argmax: Vec<u32>,
    },
    Upsample {
        x: usize,
        in_len: usize,
    },
    BatchNorm {
        x: Option<usize>,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gammav: Vec<T>,
        train: bool,
    },
    Relu {
        x: usize,
        out: Rc<Tensor<T>>,
    },
    Sigmoid {
        x: usize,
        out: Rc<Tensor<T>>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
        broadcast: bool,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
        broadcast: bool,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    Slice {
        x: usize,
        start: usize,
        in_channels: usize,
    },
    GlobalAvgPool {
        x: usize,
        len: usize,
    },
    Dense {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
    },
    Softmax {
        x: usize,
        out: Rc<Tensor<T>>,
    },
    Sum {
        x: usize,
        scale: T,
        in_shape: Shape,
    },
    Scale {
        x: usize,
        c: T,
    },
    WeightedNll {
        probs: usize,
        pv: Rc<Tensor<T>>,
        targets: Vec<usize>,
        row_weights: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
}

/// The recording tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    switches: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf reachable from it.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient of `var`, or zeros when `var` did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn same_padding_left(k: usize, dilation: usize) -> usize {
    ((k - 1) * dilation) / 2
}

impl<T: Real> Graph<T> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            switches: None,
        }
    }

    /// A graph that never records; every `Var` it produces is a constant.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
            switches: None,
        }
    }

    /// Makes every ReLU sign and max-pool winner contribute to
    /// [`switch_signature`](Self::switch_signature).
    pub fn track_switches(mut self) -> Self {
        self.switches = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    /// Hash of the piecewise-linear branch taken at every ReLU and max-pool so
    /// far. Two evaluations with equal signatures lie in the same smooth piece.
    pub fn switch_signature(&self) -> Option<u64> {
        self.switches
    }

    fn fold_switch(&mut self, v: u64) {
        if let Some(h) = &mut self.switches {
            *h = (*h ^ v).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let shape = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        Var {
            id: Some(id),
            value: Rc::new(value),
        }
    }

    fn untracked(value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    fn tracked(&self, inputs: &[&Var<T>]) -> bool {
        self.recording && inputs.iter().any(|v| v.id.is_some())
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var<T> {
        if self.recording {
            self.push(Op::Leaf, value)
        } else {
            Self::untracked(value)
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        Self::untracked(value)
    }

    /// Same-padded dilated cross-correlation. `kernel` has shape
    /// (k, C_in, C_out) and `bias` (1, 1, C_out). Tap `j` reads offset
    /// `dilation * j - floor((k - 1) * dilation / 2)`.
    pub fn conv1d(
        &mut self,
        input: &Var<T>,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        dilation: usize,
    ) -> Result<Var<T>> {
        if dilation < 1 {
            return Err(Error::Argument("dilation must be >= 1".into()));
        }
        let xs = input.shape();
        let ws = kernel.shape();
        let (k, cin, cout) = (ws.batch, ws.len, ws.channels);
        if k == 0 {
            return Err(Error::Argument("kernel size must be >= 1".into()));
        }
        if xs.channels != cin {
            return Err(Error::Shape(format!(
                "conv1d input has {} channels, kernel expects {cin}",
                xs.channels
            )));
        }
        if let Some(b) = bias {
            if b.shape() != Shape::new(1, 1, cout) {
                return Err(Error::Shape(format!(
                    "conv1d bias shape {} does not match {cout} output channels",
                    b.shape()
                )));
            }
        }
        let (bsz, len) = (xs.batch, xs.len);
        let left = same_padding_left(k, dilation) as isize;
        let x = input.value().data();
        let w = kernel.value().data();
        let mut out = vec![T::zero(); bsz * len * cout];
        for b in 0..bsz {
            for t in 0..len {
                let orow = &mut out[(b * len + t) * cout..][..cout];
                if let Some(bv) = bias {
                    orow.copy_from_slice(bv.value().data());
                }
                for j in 0..k {
                    let src = t as isize + (j * dilation) as isize - left;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &x[(b * len + src as usize) * cin..][..cin];
                    let wj = &w[j * cin * cout..][..cin * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wj[ci * cout..][..cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + xv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(Shape::new(bsz, len, cout), out)?;
        let mut inputs = vec![input, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        if !self.tracked(&inputs) {
            return Ok(Self::untracked(value));
        }
        let op = Op::Conv1d {
            x: input.id,
            w: kernel.id,
            b: bias.and_then(|b| b.id),
            xv: input.value.clone(),
            wv: kernel.value.clone(),
            dilation,
        };
        Ok(self.push(op, value))
    }

    /// Non-overlapping pooling with stride `k`. A trailing remainder is padded
    /// by repeating the last position, so the output length is `ceil(len / k)`.
    pub fn pool1d(&mut self, input: &Var<T>, k: usize, mode: PoolMode) -> Result<Var<T>> {
        if k < 1 {
            return Err(Error::Argument("pool size must be >= 1".into()));
        }
        let s = input.shape();
        if s.len == 0 {
            return Err(Error::Shape("cannot pool an empty sequence".into()));
        }
        let out_len = s.len.div_ceil(k);
        let x = input.value().data();
        let c = s.channels;
        let mut out = vec![T::zero(); s.batch * out_len * c];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0u32; out.len()];
        }
        let inv_k = T::one() / T::lit(k as f64);
        for b in 0..s.batch {
            for o in 0..out_len {
                let orow = (b * out_len + o) * c;
                for ch in 0..c {
                    let mut acc = match mode {
                        PoolMode::Max => T::neg_infinity(),
                        PoolMode::Avg => T::zero(),
                    };
                    let mut arg = 0usize;
                    for i in 0..k {
                        let src = (o * k + i).min(s.len - 1);
                        let v = x[(b * s.len + src) * c + ch];
                        match mode {
                            PoolMode::Max => {
                                if v > acc {
                                    acc = v;
                                    arg = src;
                                }
                            }
                            PoolMode::Avg => acc = acc + v,
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out[orow + ch] = acc;
                            argmax[orow + ch] = arg as u32;
                        }
                        PoolMode::Avg => out[orow + ch] = acc * inv_k,
                    }
                }
            }
        }
        let value = Tensor::new(Shape::new(s.batch, out_len, c), out)?;
        if self.switches.is_some() {
            for &a in &argmax {
                self.fold_switch(a as u64);
            }
        }
        match input.id {
            Some(x) if self.recording => Ok(self.push(
                Op::Pool {
                    x,
                    in_shape: s,
                    k,
                    argmax,
                },
                value,
            )),
            _ => Ok(Self::untracked(value)),
        }
    }

    /// Align-corners linear interpolation along the length axis.
    pub fn upsample_linear(&mut self, input: &Var<T>, target_len: usize) -> Result<Var<T>> {
        let s = input.shape();
        if target_len < s.len || target_len == 0 {
            return Err(Error::Argument(format!(
                "upsample target {target_len} is shorter than input length {}",
                s.len
            )));
        }
        if target_len == s.len {
            return Ok(input.clone());
        }
        let x = input.value().data();
        let c = s.channels;
        let mut out = vec![T::zero(); s.batch * target_len * c];
        for b in 0..s.batch {
            for t in 0..target_len {
                let (i0, i1, f) = interp_coords(t, s.len, target_len);
                let f = T::lit(f);
                let g = T::one() - f;
                let orow = &mut out[(b * target_len + t) * c..][..c];
                let r0 = &x[(b * s.len + i0) * c..][..c];
                let r1 = &x[(b * s.len + i1) * c..][..c];
                for ch in 0..c {
                    orow[ch] = g * r0[ch] + f * r1[ch];
                }
            }
        }
        let value = Tensor::new(Shape::new(s.batch, target_len, c), out)?;
        match input.id {
            Some(x) if self.recording => Ok(self.push(Op::Upsample { x, in_len: s.len }, value)),
            _ => Ok(Self::untracked(value)),
        }
    }

    /// Per-channel batch normalization. Train mode normalizes with the batch
    /// statistics (biased variance) and folds them into `stats`; eval mode
    /// normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        input: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var<T>> {
        let s = input.shape();
        let c = s.channels;
        if gamma.shape() != Shape::new(1, 1, c) || beta.shape() != Shape::new(1, 1, c) {
            return Err(Error::Shape(format!(
                "batch norm parameters must be (1, 1, {c})"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "running statistics have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let rows = s.batch * s.len;
        if mode == Mode::Train && rows < 2 {
            return Err(Error::Argument(
                "train-mode batch norm needs more than one value per channel".into(),
            ));
        }
        let x = input.value().data();
        let eps = T::lit(cfg.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let n = T::lit(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for ch in 0..c {
                        let d = row[ch] - mean[ch];
                        var[ch] = var[ch] + d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                let mom = T::lit(cfg.momentum);
                for ch in 0..c {
                    stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
                    stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = gamma.value().data();
        let bt = beta.value().data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (r, row) in x.chunks_exact(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = g[ch] * h + bt[ch];
            }
        }
        let value = Tensor::new(s, out)?;
        if !self.tracked(&[input, gamma, beta]) {
            return Ok(Self::untracked(value));
        }
        let op = Op::BatchNorm {
            x: input.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            gammav: g.to_vec(),
            train: mode == Mode::Train,
        };
        Ok(self.push(op, value))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, input: &Var<T>) -> Var<T> {
        let value = input.value().map(|v| if v > T::zero() { v } else { T::zero() });
        if self.switches.is_some() {
            for chunk in input.value().data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |m, (i, &v)| m | (((v > T::zero()) as u64) << i));
                self.fold_switch(bits);
            }
        }
        match input.id {
            Some(x) if self.recording => {
                let out = Rc::new(value.clone());
                self.push(Op::Relu { x, out }, value)
            }
            _ => Self::untracked(value),
        }
    }

    pub fn sigmoid(&mut self, input: &Var<T>) -> Var<T> {
        let value = input.value().map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        match input.id {
            Some(x) if self.recording => {
                let out = Rc::new(value.clone());
                self.push(Op::Sigmoid { x, out }, value)
            }
            _ => Self::untracked(value),
        }
    }

    fn broadcast_kind(a: Shape, b: Shape) -> Result<bool> {
        if a == b {
            Ok(false)
        } else if b.batch == a.batch && b.channels == a.channels && b.len == 1 {
            Ok(true)
        } else {
            Err(Error::Shape(format!(
                "incompatible elementwise shapes {a} and {b}"
            )))
        }
    }

    fn zip_broadcast(a: &Tensor<T>, b: &Tensor<T>, broadcast: bool, f: impl Fn(T, T) -> T) -> Vec<T> {
        let s = a.shape();
        let (ad, bd) = (a.data(), b.data());
        if !broadcast {
            return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        }
        let c = s.channels;
        let mut out = Vec::with_capacity(ad.len());
        for bi in 0..s.batch {
            let brow = &bd[bi * c..][..c];
            for t in 0..s.len {
                let arow = &ad[(bi * s.len + t) * c..][..c];
                out.extend(arow.iter().zip(brow).map(|(&x, &y)| f(x, y)));
            }
        }
        out
    }

    /// Elementwise sum. `b` may have length 1, in which case it is broadcast
    /// along the length axis.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let broadcast = Self::broadcast_kind(a.shape(), b.shape())?;
        let data = Self::zip_broadcast(a.value(), b.value(), broadcast, |x, y| x + y);
        let value = Tensor::new(a.shape(), data)?;
        if !self.tracked(&[a, b]) {
            return Ok(Self::untracked(value));
        }
        Ok(self.push(
            Op::Add {
                a: a.id,
                b: b.id,
                broadcast,
            },
            value,
        ))
    }

    /// Elementwise product, with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let broadcast = Self::broadcast_kind(a.shape(), b.shape())?;
        let data = Self::zip_broadcast(a.value(), b.value(), broadcast, |x, y| x * y);
        let value = Tensor::new(a.shape(), data)?;
        if !self.tracked(&[a, b]) {
            return Ok(Self::untracked(value));
        }
        Ok(self.push(
            Op::Mul {
                a: a.id,
                b: b.id,
                av: a.value.clone(),
                bv: b.value.clone(),
                broadcast,
            },
            value,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[&Var<T>]) -> Result<Var<T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?
            .shape();
        for v in inputs {
            let s = v.shape();
            if s.batch != first.batch || s.len != first.len {
                return Err(Error::Shape(format!(
                    "cannot concatenate {s} with {first} along channels"
                )));
            }
        }
        if inputs.len() == 1 {
            return Ok(inputs[0].clone());
        }
        let total: usize = inputs.iter().map(|v| v.shape().channels).sum();
        let rows = first.batch * first.len;
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in inputs {
                let c = v.shape().channels;
                out.extend_from_slice(&v.value().data()[r * c..][..c]);
            }
        }
        let value = Tensor::new(Shape::new(first.batch, first.len, total), out)?;
        if !self.tracked(inputs) {
            return Ok(Self::untracked(value));
        }
        let parts = inputs.iter().map(|v| (v.id, v.shape().channels)).collect();
        Ok(self.push(Op::Concat { parts }, value))
    }

    pub fn slice_channels(&mut self, input: &Var<T>, start: usize, count: usize) -> Result<Var<T>> {
        let value = input.value().channel_slice(start, count)?;
        match input.id {
            Some(x) if self.recording => Ok(self.push(
                Op::Slice {
                    x,
                    start,
                    in_channels: input.shape().channels,
                },
                value,
            )),
            _ => Ok(Self::untracked(value)),
        }
    }

    /// Per-channel mean over the length axis, producing (batch, 1, channels).
    pub fn global_avg_pool(&mut self, input: &Var<T>) -> Result<Var<T>> {
        let s = input.shape();
        if s.len == 0 {
            return Err(Error::Shape("global average pool over empty length".into()));
        }
        let c = s.channels;
        let x = input.value().data();
        let inv = T::one() / T::lit(s.len as f64);
        let mut out = vec![T::zero(); s.batch * c];
        for b in 0..s.batch {
            let orow = &mut out[b * c..][..c];
            for t in 0..s.len {
                for (o, &v) in orow.iter_mut().zip(&x[(b * s.len + t) * c..][..c]) {
                    *o = *o + v;
                }
            }
            orow.iter_mut().for_each(|o| *o = *o * inv);
        }
        let value = Tensor::new(Shape::new(s.batch, 1, c), out)?;
        match input.id {
            Some(x) if self.recording => Ok(self.push(Op::GlobalAvgPool { x, len: s.len }, value)),
            _ => Ok(Self::untracked(value)),
        }
    }

    /// Affine map of a (batch, 1, C_in) input by a (1, C_in, C_out) matrix.
    pub fn dense(&mut self, input: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let s = input.shape();
        let ws = weight.shape();
        if s.len != 1 {
            return Err(Error::Shape(format!("dense input must have length 1, got {s}")));
        }
        if ws.batch != 1 || ws.len != s.channels {
            return Err(Error::Shape(format!(
                "dense weight {ws} does not accept {} input channels",
                s.channels
            )));
        }
        let (cin, cout) = (ws.len, ws.channels);
        if bias.shape() != Shape::new(1, 1, cout) {
            return Err(Error::Shape(format!("dense bias must be (1, 1, {cout})")));
        }
        let x = input.value().data();
        let w = weight.value().data();
        let mut out = Vec::with_capacity(s.batch * cout);
        for b in 0..s.batch {
            let mut row = bias.value().data().to_vec();
            for (i, &xv) in x[b * cin..][..cin].iter().enumerate() {
                for (o, &wv) in row.iter_mut().zip(&w[i * cout..][..cout]) {
                    *o = *o + xv * wv;
                }
            }
            out.extend(row);
        }
        let value = Tensor::new(Shape::new(s.batch, 1, cout), out)?;
        if !self.tracked(&[input, weight, bias]) {
            return Ok(Self::untracked(value));
        }
        Ok(self.push(
            Op::Dense {
                x: input.id,
                w: weight.id,
                b: bias.id,
                xv: input.value.clone(),
                wv: weight.value.clone(),
            },
            value,
        ))
    }

    /// Softmax across channels at every (batch, position).
    pub fn softmax_channels(&mut self, input: &Var<T>) -> Result<Var<T>> {
        let s = input.shape();
        if s.channels < 2 {
            return Err(Error::Shape("softmax needs at least two channels".into()));
        }
        let mut out = input.value().data().to_vec();
        for row in out.chunks_exact_mut(s.channels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(s, out)?;
        match input.id {
            Some(x) if self.recording => {
                let out = Rc::new(value.clone());
                Ok(self.push(Op::Softmax { x, out }, value))
            }
            _ => Ok(Self::untracked(value)),
        }
    }

    fn reduce(&mut self, input: &Var<T>, scale: T) -> Var<T> {
        let total = input.value().data().iter().copied().sum::<T>() * scale;
        let value = Tensor::scalar(total);
        match input.id {
            Some(x) if self.recording => self.push(
                Op::Sum {
                    x,
                    scale,
                    in_shape: input.shape(),
                },
                value,
            ),
            _ => Self::untracked(value),
        }
    }

    pub fn sum(&mut self, input: &Var<T>) -> Var<T> {
        self.reduce(input, T::one())
    }

    pub fn mean(&mut self, input: &Var<T>) -> Var<T> {
        let n = input.value().numel().max(1);
        self.reduce(input, T::one() / T::lit(n as f64))
    }

    pub fn scale(&mut self, input: &Var<T>, c: T) -> Var<T> {
        let value = input.value().map(|v| v * c);
        match input.id {
            Some(x) if self.recording => self.push(Op::Scale { x, c }, value),
            _ => Self::untracked(value),
        }
    }

    /// `-(1/N) * sum_r w_r * ln(max(p[r, y_r], 1e-12))` over the rows with a
    /// nonzero weight, where `N` is the number of such rows. Zero rows give a
    /// loss of 0 with a zero gradient.
    pub fn weighted_nll(
        &mut self,
        probs: &Var<T>,
        targets: &[usize],
        row_weights: &[T],
    ) -> Result<Var<T>> {
        let s = probs.shape();
        let rows = s.batch * s.len;
        if targets.len() != rows || row_weights.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets / {} weights for {rows} rows",
                targets.len(),
                row_weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= s.channels) {
            return Err(Error::Argument(format!(
                "target {bad} outside 0..{}",
                s.channels
            )));
        }
        let floor = T::lit(1e-12);
        let p = probs.value().data();
        let active = row_weights.iter().filter(|w| **w != T::zero()).count();
        let denom = T::lit(active.max(1) as f64);
        let mut total = T::zero();
        for r in 0..rows {
            let w = row_weights[r];
            if w == T::zero() {
                continue;
            }
            total = total - w * p[r * s.channels + targets[r]].max(floor).ln();
        }
        let value = Tensor::scalar(total / denom);
        match probs.id {
            Some(id) if self.recording => Ok(self.push(
                Op::WeightedNll {
                    probs: id,
                    pv: probs.value.clone(),
                    targets: targets.to_vec(),
                    row_weights: row_weights.to_vec(),
                    denom,
                },
                value,
            )),
            _ => Ok(Self::untracked(value)),
        }
    }

    /// Backpropagates from a scalar. Nodes are visited in reverse insertion
    /// order, so accumulation order is fixed for a fixed graph.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        let mut by_id = HashMap::new();
        let Some(root) = loss.id else {
            return Ok(Gradients { by_id });
        };
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let numel = |id: usize| self.nodes[id].shape.numel();

        for id in (0..=root).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    by_id.insert(id, Tensor::new(node.shape, gy)?);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    xv,
                    wv,
                    dilation,
                } => {
                    let xs = xv.shape();
                    let ws = wv.shape();
                    let (k, cin, cout) = (ws.batch, ws.len, ws.channels);
                    let (bsz, len) = (xs.batch, xs.len);
                    let left = same_padding_left(k, *dilation) as isize;
                    let xd = xv.data();
                    let wd = wv.data();
                    let mut dx = x.map(|_| vec![T::zero(); xd.len()]);
                    let mut dw = w.map(|_| vec![T::zero(); wd.len()]);
                    for bi in 0..bsz {
                        for t in 0..len {
                            let grow = &gy[(bi * len + t) * cout..][..cout];
                            for j in 0..k {
                                let src = t as isize + (j * dilation) as isize - left;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xo = (bi * len + src as usize) * cin;
                                let wo = j * cin * cout;
                                if let Some(dx) = dx.as_mut() {
                                    for ci in 0..cin {
                                        let wrow = &wd[wo + ci * cout..][..cout];
                                        let dot = grow
                                            .iter()
                                            .zip(wrow)
                                            .fold(T::zero(), |a, (&g, &w)| a + g * w);
                                        dx[xo + ci] = dx[xo + ci] + dot;
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    for ci in 0..cin {
                                        let xval = xd[xo + ci];
                                        if xval == T::zero() {
                                            continue;
                                        }
                                        let drow = &mut dw[wo + ci * cout..][..cout];
                                        for (d, &g) in drow.iter_mut().zip(grow) {
                                            *d = *d + xval * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let (Some(id), Some(dx)) = (x, dx) {
                        add_into(&mut grads, *id, dx);
                    }
                    if let (Some(id), Some(dw)) = (w, dw) {
                        add_into(&mut grads, *id, dw);
                    }
                    if let Some(bid) = b {
                        accumulate(&mut grads, *bid, cout, |db| {
                            for row in gy.chunks_exact(cout) {
                                for (d, &g) in db.iter_mut().zip(row) {
                                    *d = *d + g;
                                }
                            }
                        });
                    }
                }
                Op::Pool {
                    x,
                    in_shape,
                    k,
                    argmax,
                } => {
                    let s = *in_shape;
                    let c = s.channels;
                    let out_len = node.shape.len;
                    let inv_k = T::one() / T::lit(*k as f64);
                    accumulate(&mut grads, *x, s.numel(), |dx| {
                        for b in 0..s.batch {
                            for o in 0..out_len {
                                let orow = (b * out_len + o) * c;
                                for ch in 0..c {
                                    let g = gy[orow + ch];
                                    if argmax.is_empty() {
                                        for i in 0..*k {
                                            let src = (o * k + i).min(s.len - 1);
                                            let di = (b * s.len + src) * c + ch;
                                            dx[di] = dx[di] + g * inv_k;
                                        }
                                    } else {
                                        let src = argmax[orow + ch] as usize;
                                        let di = (b * s.len + src) * c + ch;
                                        dx[di] = dx[di] + g;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Upsample { x, in_len } => {
                    let s = node.shape;
                    let c = s.channels;
                    let in_len = *in_len;
                    accumulate(&mut grads, *x, s.batch * in_len * c, |dx| {
                        for b in 0..s.batch {
                            for t in 0..s.len {
                                let (i0, i1, f) = interp_coords(t, in_len, s.len);
                                let f = T::lit(f);
                                let g0 = T::one() - f;
                                for ch in 0..c {
                                    let g = gy[(b * s.len + t) * c + ch];
                                    let a = (b * in_len + i0) * c + ch;
                                    let z = (b * in_len + i1) * c + ch;
                                    dx[a] = dx[a] + g0 * g;
                                    dx[z] = dx[z] + f * g;
                                }
                            }
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    gammav,
                    train,
                } => {
                    let c = node.shape.channels;
                    let rows = node.shape.batch * node.shape.len;
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let g = gy[r * c + ch];
                            sum_dy[ch] = sum_dy[ch] + g;
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + g * xhat[r * c + ch];
                        }
                    }
                    if let Some(gid) = gamma {
                        accumulate(&mut grads, *gid, c, |d| {
                            for ch in 0..c {
                                d[ch] = d[ch] + sum_dy_xhat[ch];
                            }
                        });
                    }
                    if let Some(bid) = beta {
                        accumulate(&mut grads, *bid, c, |d| {
                            for ch in 0..c {
                                d[ch] = d[ch] + sum_dy[ch];
                            }
                        });
                    }
                    if let Some(xid) = x {
                        let n = T::lit(rows as f64);
                        accumulate(&mut grads, *xid, rows * c, |dx| {
                            for r in 0..rows {
                                for ch in 0..c {
                                    let i = r * c + ch;
                                    let scale = gammav[ch] * inv_std[ch];
                                    let d = if *train {
                                        scale
                                            * (gy[i]
                                                - sum_dy[ch] / n
                                                - xhat[i] * sum_dy_xhat[ch] / n)
                                    } else {
                                        scale * gy[i]
                                    };
                                    dx[i] = dx[i] + d;
                                }
                            }
                        });
                    }
                }
                Op::Relu { x, out } => {
                    accumulate(&mut grads, *x, out.numel(), |dx| {
                        for ((d, &g), &o) in dx.iter_mut().zip(&gy).zip(out.data()) {
                            if o > T::zero() {
                                *d = *d + g;
                            }
                        }
                    });
                }
                Op::Sigmoid { x, out } => {
                    accumulate(&mut grads, *x, out.numel(), |dx| {
                        for ((d, &g), &o) in dx.iter_mut().zip(&gy).zip(out.data()) {
                            *d = *d + g * o * (T::one() - o);
                        }
                    });
                }
                Op::Add { a, b, broadcast } => {
                    if let Some(aid) = a {
                        accumulate(&mut grads, *aid, gy.len(), |d| {
                            for (d, &g) in d.iter_mut().zip(&gy) {
                                *d = *d + g;
                            }
                        });
                    }
                    if let Some(bid) = b {
                        let n = numel(*bid);
                        accumulate(&mut grads, *bid, n, |d| {
                            reduce_broadcast(d, &gy, node.shape, *broadcast, |g, _| g)
                        });
                    }
                }
                Op::Mul {
                    a,
                    b,
                    av,
                    bv,
                    broadcast,
                } => {
                    let s = node.shape;
                    if let Some(aid) = a {
                        let prod = Self::zip_broadcast(
                            &Tensor::new(s, gy.clone())?,
                            bv,
                            *broadcast,
                            |g, y| g * y,
                        );
                        add_into(&mut grads, *aid, prod);
                    }
                    if let Some(bid) = b {
                        let n = numel(*bid);
                        let ad = av.data();
                        accumulate(&mut grads, *bid, n, |d| {
                            reduce_broadcast(d, &gy, s, *broadcast, |g, i| g * ad[i])
                        });
                    }
                }
                Op::Concat { parts } => {
                    let total = node.shape.channels;
                    let rows = node.shape.batch * node.shape.len;
                    let mut offset = 0;
                    for &(pid, c) in parts {
                        if let Some(pid) = pid {
                            accumulate(&mut grads, pid, rows * c, |d| {
                                for r in 0..rows {
                                    let src = &gy[r * total + offset..][..c];
                                    for (d, &g) in d[r * c..][..c].iter_mut().zip(src) {
                                        *d = *d + g;
                                    }
                                }
                            });
                        }
                        offset += c;
                    }
                }
                Op::Slice {
                    x,
                    start,
                    in_channels,
                } => {
                    let c = node.shape.channels;
                    let rows = node.shape.batch * node.shape.len;
                    accumulate(&mut grads, *x, rows * in_channels, |d| {
                        for r in 0..rows {
                            let dst = &mut d[r * in_channels + start..][..c];
                            for (d, &g) in dst.iter_mut().zip(&gy[r * c..][..c]) {
                                *d = *d + g;
                            }
                        }
                    });
                }
                Op::GlobalAvgPool { x, len } => {
                    let c = node.shape.channels;
                    let bsz = node.shape.batch;
                    let inv = T::one() / T::lit(*len as f64);
                    accumulate(&mut grads, *x, bsz * len * c, |d| {
                        for b in 0..bsz {
                            for t in 0..*len {
                                for ch in 0..c {
                                    let i = (b * len + t) * c + ch;
                                    d[i] = d[i] + gy[b * c + ch] * inv;
                                }
                            }
                        }
                    });
                }
                Op::Dense { x, w, b, xv, wv } => {
                    let ws = wv.shape();
                    let (cin, cout) = (ws.len, ws.channels);
                    let bsz = node.shape.batch;
                    let xd = xv.data();
                    let wd = wv.data();
                    if let Some(xid) = x {
                        accumulate(&mut grads, *xid, bsz * cin, |d| {
                            for bi in 0..bsz {
                                let grow = &gy[bi * cout..][..cout];
                                for i in 0..cin {
                                    let dot = grow
                                        .iter()
                                        .zip(&wd[i * cout..][..cout])
                                        .fold(T::zero(), |a, (&g, &w)| a + g * w);
                                    d[bi * cin + i] = d[bi * cin + i] + dot;
                                }
                            }
                        });
                    }
                    if let Some(wid) = w {
                        accumulate(&mut grads, *wid, cin * cout, |d| {
                            for bi in 0..bsz {
                                let grow = &gy[bi * cout..][..cout];
                                for i in 0..cin {
                                    let xval = xd[bi * cin + i];
                                    for (dd, &g) in d[i * cout..][..cout].iter_mut().zip(grow) {
                                        *dd = *dd + xval * g;
                                    }
                                }
                            }
                        });
                    }
                    if let Some(bid) = b {
                        accumulate(&mut grads, *bid, cout, |d| {
                            for row in gy.chunks_exact(cout) {
                                for (dd, &g) in d.iter_mut().zip(row) {
                                    *dd = *dd + g;
                                }
                            }
                        });
                    }
                }
                Op::Softmax { x, out } => {
                    let c = node.shape.channels;
                    accumulate(&mut grads, *x, out.numel(), |d| {
                        for ((drow, grow), yrow) in d
                            .chunks_exact_mut(c)
                            .zip(gy.chunks_exact(c))
                            .zip(out.data().chunks_exact(c))
                        {
                            let dot = grow
                                .iter()
                                .zip(yrow)
                                .fold(T::zero(), |a, (&g, &y)| a + g * y);
                            for ((dd, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *dd = *dd + y * (g - dot);
                            }
                        }
                    });
                }
                Op::Sum { x, scale, in_shape } => {
                    let g = gy[0] * *scale;
                    accumulate(&mut grads, *x, in_shape.numel(), |d| {
                        d.iter_mut().for_each(|v| *v = *v + g);
                    });
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, gy.len(), |d| {
                        for (dd, &g) in d.iter_mut().zip(&gy) {
                            *dd = *dd + g * *c;
                        }
                    });
                }
                Op::WeightedNll {
                    probs,
                    pv,
                    targets,
                    row_weights,
                    denom,
                } => {
                    let c = pv.shape().channels;
                    let p = pv.data();
                    let floor = T::lit(1e-12);
                    let g = gy[0];
                    accumulate(&mut grads, *probs, p.len(), |d| {
                        for (r, (&y, &w)) in targets.iter().zip(row_weights).enumerate() {
                            let i = r * c + y;
                            if w == T::zero() || p[i] <= floor {
                                continue;
                            }
                            d[i] = d[i] - g * w / (*denom * p[i]);
                        }
                    });
                }
            }
        }
        Ok(Gradients { by_id })
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, delta: Vec<T>) {
    match grads[id].as_mut() {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b = *b + d;
            }
        }
        None => grads[id] = Some(delta),
    }
}

/// Accumulates `f(gy[i], i)` into `d`, summing over the length axis when `b`
/// was broadcast.
fn reduce_broadcast<T: Real>(
    d: &mut [T],
    gy: &[T],
    s: Shape,
    broadcast: bool,
    f: impl Fn(T, usize) -> T,
) {
    if !broadcast {
        for (i, (dd, &g)) in d.iter_mut().zip(gy).enumerate() {
            *dd = *dd + f(g, i);
        }
        return;
    }
    let c = s.channels;
    for b in 0..s.batch {
        for t in 0..s.len {
            for ch in 0..c {
                let i = (b * s.len + t) * c + ch;
                d[b * c + ch] = d[b * c + ch] + f(gy[i], i);
            }
        }
    }
}

/// Source indices and blend weight for align-corners interpolation of output
/// position `t` when stretching `in_len` samples to `out_len`.
fn interp_coords(t: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 || out_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = t as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}
