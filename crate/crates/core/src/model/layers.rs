//! Building blocks of the network. Each layer knows its parameter names and
//! shapes ([`Specs`]) and how to run itself inside a [`Forward`] context.

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolMode, Var};
use crate::tensor::{Real, Shape};

use super::params::{Init, Specs};
use super::Forward;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Same-padded 1-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn new(name: String, k: usize, cin: usize, cout: usize) -> Self {
        Conv { name, k, cin, cout, dilation: 1 }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn collect(&self, s: &mut Specs) {
        s.param(
            self.weight_name(),
            Shape::new(self.k, self.cin, self.cout),
            Init::Glorot {
                fan_in: self.k * self.cin,
                fan_out: self.k * self.cout,
            },
        );
        s.param(self.bias_name(), Shape::new(1, 1, self.cout), Init::Zeros);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.var(&self.weight_name())?;
        let b = cx.var(&self.bias_name())?;
        cx.graph.conv1d(x, &w, Some(&b), self.dilation)
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: String,
}

impl ConvBnRelu {
    pub fn new(name: &str, k: usize, cin: usize, cout: usize) -> Self {
        ConvBnRelu {
            conv: Conv::new(join(name, "conv"), k, cin, cout),
            norm: join(name, "bn"),
        }
    }

    pub fn collect(&self, s: &mut Specs) {
        self.conv.collect(s);
        let c = self.conv.cout;
        s.param(join(&self.norm, "gamma"), Shape::new(1, 1, c), Init::Ones);
        s.param(join(&self.norm, "beta"), Shape::new(1, 1, c), Init::Zeros);
        s.norm(self.norm.clone(), c);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(cx, x)?;
        let y = cx.batch_norm(&self.norm, &y)?;
        Ok(cx.graph.relu(&y))
    }
}

/// Residual encoder-decoder block.
///
/// The input is first mapped to `mid` channels. That map runs through
/// `depth` levels of conv + factor-2 max-pool, a bridge conv, and a mirrored
/// decoder that upsamples and concatenates the encoder map of the same
/// level. A final conv maps the result to `cout`, and a pointwise conv of
/// the reshaped input is added to it.
#[derive(Debug, Clone)]
pub struct UUnit {
    pub name: String,
    pub depth: usize,
    pub reshape: ConvBnRelu,
    pub encoders: Vec<ConvBnRelu>,
    pub bridge: ConvBnRelu,
    pub decoders: Vec<ConvBnRelu>,
    pub out: Conv,
    pub residual: Conv,
}

impl UUnit {
    pub fn new(name: &str, k: usize, cin: usize, mid: usize, cout: usize, depth: usize) -> Self {
        UUnit {
            name: name.to_string(),
            depth,
            reshape: ConvBnRelu::new(&join(name, "reshape"), k, cin, mid),
            encoders: (0..depth)
                .map(|i| ConvBnRelu::new(&join(name, &format!("enc{i}")), k, mid, mid))
                .collect(),
            bridge: ConvBnRelu::new(&join(name, "bridge"), k, mid, mid),
            decoders: (0..depth)
                .map(|i| ConvBnRelu::new(&join(name, &format!("dec{i}")), k, 2 * mid, mid))
                .collect(),
            out: Conv::new(join(name, "out"), k, mid, cout),
            residual: Conv::new(join(name, "residual"), 1, mid, cout),
        }
    }

    pub fn collect(&self, s: &mut Specs) {
        self.reshape.collect(s);
        for e in &self.encoders {
            e.collect(s);
        }
        self.bridge.collect(s);
        for d in &self.decoders {
            d.collect(s);
        }
        self.out.collect(s);
        self.residual.collect(s);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let len = x.shape().len;
        if len < 1 << self.depth {
            return Err(Error::Shape(format!(
                "{}: input length {len} is shorter than 2^{}",
                self.name, self.depth
            )));
        }
        let reshaped = self.reshape.forward(cx, x)?;
        let mut levels = Vec::with_capacity(self.depth);
        let mut cur = reshaped.clone();
        for enc in &self.encoders {
            let e = enc.forward(cx, &cur)?;
            cur = cx.graph.pool1d(&e, 2, PoolMode::Max)?;
            levels.push(e);
        }
        cur = self.bridge.forward(cx, &cur)?;
        for (dec, skip) in self.decoders.iter().zip(&levels).rev() {
            let up = cx.graph.upsample_linear(&cur, skip.shape().len)?;
            let cat = cx.graph.concat_channels(&[&up, skip])?;
            cur = dec.forward(cx, &cat)?;
        }
        let inner = self.out.forward(cx, &cur)?;
        let shortcut = self.residual.forward(cx, &reshaped)?;
        cx.graph.add(&inner, &shortcut)
    }
}

/// A U-unit with its nested encoder-decoder and residual path removed:
/// the channel reshape followed directly by the output conv.
#[derive(Debug, Clone)]
pub struct PlainUnit {
    pub reshape: ConvBnRelu,
    pub out: Conv,
}

impl PlainUnit {
    pub fn new(name: &str, k: usize, cin: usize, mid: usize, cout: usize) -> Self {
        PlainUnit {
            reshape: ConvBnRelu::new(&join(name, "reshape"), k, cin, mid),
            out: Conv::new(join(name, "out"), k, mid, cout),
        }
    }

    pub fn collect(&self, s: &mut Specs) {
        self.reshape.collect(s);
        self.out.collect(s);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.reshape.forward(cx, x)?;
        self.out.forward(cx, &y)
    }
}

/// One stage of a stream: a nested U-unit, or for the basic variant the same
/// unit without its nested part.
#[derive(Debug, Clone)]
pub enum Block {
    Nested(UUnit),
    Basic(PlainUnit),
}

impl Block {
    pub fn collect(&self, s: &mut Specs) {
        match self {
            Block::Nested(u) => u.collect(s),
            Block::Basic(c) => c.collect(s),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::Nested(u) => u.forward(cx, x),
            Block::Basic(c) => c.forward(cx, x),
        }
    }
}

/// Multi-scale extraction: parallel dilated convs, concatenated, then a
/// channel-reducing bottleneck.
///
/// Each branch produces `c / 2` channels, so the concatenation of the four
/// rate-1..4 branches has `2c` channels and the bottleneck reduces that by
/// `rate`.
#[derive(Debug, Clone)]
pub struct Mse {
    pub name: String,
    pub branches: Vec<Conv>,
    pub reduce: ConvBnRelu,
    pub refine: ConvBnRelu,
}

impl Mse {
    /// `pointwise` selects a kernel-1 reduction conv; otherwise it uses `k`.
    pub fn new(name: &str, c: usize, k: usize, dilations: &[usize], rate: usize, pointwise: bool) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Config(format!("{name}: {c} input channels is not even")));
        }
        let branch = c / 2;
        let concat = branch * dilations.len();
        if rate == 0 || concat % rate != 0 {
            return Err(Error::Config(format!(
                "{name}: {concat} concatenated channels are not divisible by rate {rate}"
            )));
        }
        let out = concat / rate;
        Ok(Mse {
            name: name.to_string(),
            branches: dilations
                .iter()
                .map(|&d| Conv::new(join(name, &format!("dconv{d}")), k, c, branch).dilated(d))
                .collect(),
            reduce: ConvBnRelu::new(&join(name, "reduce"), if pointwise { 1 } else { k }, concat, out),
            refine: ConvBnRelu::new(&join(name, "refine"), k, out, out),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.refine.conv.cout
    }

    pub fn collect(&self, s: &mut Specs) {
        for b in &self.branches {
            b.collect(s);
        }
        self.reduce.collect(s);
        self.refine.collect(s);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(cx, x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var<T>> = outs.iter().collect();
        let cat = cx.graph.concat_channels(&refs)?;
        let y = self.reduce.forward(cx, &cat)?;
        self.refine.forward(cx, &y)
    }
}

/// Affine map over channels for (batch, 1, channels) inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Dense {
    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn collect(&self, s: &mut Specs) {
        s.param(
            self.weight_name(),
            Shape::new(1, self.cin, self.cout),
            Init::Glorot {
                fan_in: self.cin,
                fan_out: self.cout,
            },
        );
        s.param(self.bias_name(), Shape::new(1, 1, self.cout), Init::Zeros);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.var(&self.weight_name())?;
        let b = cx.var(&self.bias_name())?;
        cx.graph.dense(x, &w, &b)
    }
}

/// `a + b + a * b`, elementwise.
pub fn fuse<T: Real>(g: &mut Graph<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot fuse streams of shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let sum = g.add(a, b)?;
    let prod = g.mul(a, b)?;
    g.add(&sum, &prod)
}

/// Multimodal attention: fuse both streams, then rescale channels by a
/// squeeze-and-excitation gate computed from the fused map.
#[derive(Debug, Clone)]
pub struct Mma {
    pub name: String,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mma {
    pub fn new(name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = (channels / ratio).max(1);
        Mma {
            name: name.to_string(),
            fc1: Dense {
                name: join(name, "fc1"),
                cin: channels,
                cout: hidden,
            },
            fc2: Dense {
                name: join(name, "fc2"),
                cin: hidden,
                cout: channels,
            },
        }
    }

    pub fn collect(&self, s: &mut Specs) {
        self.fc1.collect(s);
        self.fc2.collect(s);
    }

    /// Channel weights in (0, 1) for a fused map, shape (batch, 1, channels).
    pub fn gate<T: Real>(&self, cx: &mut Forward<T>, fused: &Var<T>) -> Result<Var<T>> {
        let squeezed = cx.graph.global_avg_pool(fused)?;
        let h = self.fc1.forward(cx, &squeezed)?;
        let h = cx.graph.relu(&h);
        let h = self.fc2.forward(cx, &h)?;
        Ok(cx.graph.sigmoid(&h))
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, eeg: &Var<T>, eog: &Var<T>) -> Result<Var<T>> {
        let fused = fuse(cx.graph, eeg, eog)?;
        let gate = self.gate(cx, &fused)?;
        cx.graph.mul(&fused, &gate)
    }
}

/// Averages each epoch's samples, then a pointwise conv and softmax give
/// one class distribution per epoch.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub epoch_len: usize,
    pub seq_len: usize,
    pub conv: Conv,
}

impl Classifier {
    pub fn collect(&self, s: &mut Specs) {
        self.conv.collect(s);
    }

    pub fn forward<T: Real>(&self, cx: &mut Forward<T>, x: &Var<T>) -> Result<Var<T>> {
        let len = x.shape().len;
        if len != self.seq_len * self.epoch_len {
            return Err(Error::Shape(format!(
                "classifier expects {} x {} samples, got length {len}",
                self.seq_len, self.epoch_len
            )));
        }
        let pooled = cx.graph.pool1d(x, self.epoch_len, PoolMode::Avg)?;
        let logits = self.conv.forward(cx, &pooled)?;
        cx.graph.softmax_channels(&logits)
    }
}
