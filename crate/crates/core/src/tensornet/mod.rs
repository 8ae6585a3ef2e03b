//! A small convolutional Q-network with exact analytic gradients.
//!
//! Only a fixed menu of layers is supported: valid stride-1 convolutions,
//! 2×2/2 max pooling, ReLU, dense layers and a dueling value/advantage head.
//! Convolutions are lowered to matrix products (im2col) over the whole batch.
//!
//! Subgradient conventions: ReLU passes no gradient at exactly 0, and max
//! pooling routes the gradient to the first maximal element of a window in
//! row-major order.

mod checkpoint;
mod gradcheck;
mod optim;

use std::borrow::Cow;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_FULL_LIMIT};
pub use optim::{rmsprop_update, RmsProp};

use crate::{Error, Result};

/// Dense row-major array of up to four dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Dimension(format!("{}-d tensors are not supported", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Valid, stride-1 convolution with square kernels.
    Conv { filters: usize, kernel: usize },
    /// 2×2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    Relu,
    Dense { units: usize },
    /// Linear map to one value plus `actions` advantages, combined as
    /// `V + A(a) - mean(A)`.
    DuelingHead { actions: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { filters, kernel } => write!(f, "conv {filters} {kernel}"),
            LayerSpec::MaxPool => f.write_str("maxpool"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Dense { units } => write!(f, "dense {units}"),
            LayerSpec::DuelingHead { actions } => write!(f, "dueling {actions}"),
        }
    }
}

impl LayerSpec {
    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad layer line `{line}`")))
        };
        let spec = match parts.first().copied() {
            Some("conv") if parts.len() == 3 => LayerSpec::Conv {
                filters: num(1)?,
                kernel: num(2)?,
            },
            Some("maxpool") if parts.len() == 1 => LayerSpec::MaxPool,
            Some("relu") if parts.len() == 1 => LayerSpec::Relu,
            Some("dense") if parts.len() == 2 => LayerSpec::Dense { units: num(1)? },
            Some("dueling") if parts.len() == 2 => LayerSpec::DuelingHead { actions: num(1)? },
            _ => return Err(Error::Format(format!("bad layer line `{line}`"))),
        };
        Ok(spec)
    }

    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::DuelingHead { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Plain,
    Dueling,
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    /// Two conv layers and a 64-unit dense layer behind a 4×4 max-pool stem.
    Tiny,
    /// conv 32@5 → pool → conv 32@5 → pool → conv 64@4 → pool → conv 64@3 →
    /// dense 512 → output.
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Tiny => "tiny",
            Profile::Paper => "paper",
        }
    }

    pub fn layers(self, actions: usize, head: Head) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let mut v = match self {
            Profile::Tiny => vec![
                MaxPool,
                MaxPool,
                Conv { filters: 16, kernel: 3 },
                Relu,
                MaxPool,
                Conv { filters: 32, kernel: 3 },
                Relu,
                Dense { units: 64 },
                Relu,
            ],
            Profile::Paper => vec![
                Conv { filters: 32, kernel: 5 },
                Relu,
                MaxPool,
                Conv { filters: 32, kernel: 5 },
                Relu,
                MaxPool,
                Conv { filters: 64, kernel: 4 },
                Relu,
                MaxPool,
                Conv { filters: 64, kernel: 3 },
                Relu,
                Dense { units: 512 },
                Relu,
            ],
        };
        v.push(match head {
            Head::Plain => Dense { units: actions },
            Head::Dueling => DuelingHead { actions },
        });
        v
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown network profile `{s}`"))),
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(self) -> usize {
        match self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Deliberate backward-pass corruptions used to prove the gradient check
/// catches real bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Dense input gradient reads the weight matrix with transposed layout.
    TransposedDenseBackward,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Convolutional Q-network plus its RMSProp state.
#[derive(Debug)]
pub struct QNet {
    input: Shape,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    params: Vec<Option<Params>>,
    accum: Vec<Option<Params>>,
    pub optimizer: RmsProp,
    /// Optimizer steps applied so far.
    pub step: u64,
    head: Head,
    id: u64,
    version: u64,
    fault: Option<Fault>,
}

impl Clone for QNet {
    /// Deep copy with a fresh identity: caches from the original do not
    /// validate against the copy.
    fn clone(&self) -> Self {
        QNet {
            input: self.input,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            accum: self.accum.clone(),
            optimizer: self.optimizer,
            step: self.step,
            head: self.head,
            id: fresh_id(),
            version: 0,
            fault: self.fault,
        }
    }
}

impl PartialEq for QNet {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input
            && self.layers == other.layers
            && self.params == other.params
            && self.accum == other.accum
            && self.optimizer == other.optimizer
            && self.step == other.step
    }
}

fn infer_shapes(input: Shape, layers: &[LayerSpec]) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (i, l) in layers.iter().enumerate() {
        let bad = |msg: String| Error::Dimension(format!("layer {i} ({l}): {msg}"));
        cur = match (*l, cur) {
            (LayerSpec::Conv { filters, kernel }, Shape::Spatial { h, w, .. }) => {
                if kernel == 0 || filters == 0 || kernel > h || kernel > w {
                    return Err(bad(format!("kernel does not fit input {cur}")));
                }
                Shape::Spatial {
                    c: filters,
                    h: h - kernel + 1,
                    w: w - kernel + 1,
                }
            }
            (LayerSpec::Conv { .. }, Shape::Flat(_)) => {
                return Err(bad("convolution after a flat layer".into()))
            }
            (LayerSpec::MaxPool, Shape::Spatial { c, h, w }) => {
                if h < 2 || w < 2 {
                    return Err(bad(format!("cannot pool {cur}")));
                }
                Shape::Spatial { c, h: h / 2, w: w / 2 }
            }
            (LayerSpec::MaxPool, Shape::Flat(_)) => return Err(bad("pooling a flat input".into())),
            (LayerSpec::Relu, s) => s,
            (LayerSpec::Dense { units }, _) => {
                if units == 0 {
                    return Err(bad("zero units".into()));
                }
                Shape::Flat(units)
            }
            (LayerSpec::DuelingHead { actions }, _) => {
                if actions == 0 {
                    return Err(bad("zero actions".into()));
                }
                Shape::Flat(actions)
            }
        };
        shapes.push(cur);
    }
    Ok(shapes)
}

impl QNet {
    /// Builds a network with Glorot-uniform weights and zero biases.
    ///
    /// The last layer must be `Dense` (plain head) or `DuelingHead`.
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let (c, h, w) = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty input shape {input:?}")));
        }
        let input = Shape::Spatial { c, h, w };
        let head = match layers.last() {
            Some(LayerSpec::Dense { .. }) => Head::Plain,
            Some(LayerSpec::DuelingHead { .. }) => Head::Dueling,
            _ => {
                return Err(Error::Config(
                    "network must end in a dense or dueling layer".into(),
                ))
            }
        };
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::DuelingHead { .. }))
        {
            return Err(Error::Config("dueling head must be the last layer".into()));
        }
        let shapes = infer_shapes(input, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        let mut prev = input;
        for (l, &out) in layers.iter().zip(&shapes) {
            params.push(match *l {
                LayerSpec::Conv { filters, kernel } => {
                    let cin = match prev {
                        Shape::Spatial { c, .. } => c,
                        Shape::Flat(_) => unreachable!(),
                    };
                    let fan_in = cin * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    Some(init_params(&mut rng, &[filters, cin, kernel, kernel], filters, fan_in, fan_out))
                }
                LayerSpec::Dense { units } => {
                    Some(init_params(&mut rng, &[units, prev.size()], units, prev.size(), units))
                }
                LayerSpec::DuelingHead { actions } => Some(init_params(
                    &mut rng,
                    &[actions + 1, prev.size()],
                    actions + 1,
                    prev.size(),
                    actions + 1,
                )),
                _ => None,
            });
            prev = out;
        }
        let accum = params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Params {
                    weight: Tensor::zeros(&p.weight.shape),
                    bias: Tensor::zeros(&p.bias.shape),
                })
            })
            .collect();
        Ok(QNet {
            input,
            layers,
            shapes,
            params,
            accum,
            optimizer: RmsProp::default(),
            step: 0,
            head,
            id: fresh_id(),
            version: 0,
            fault: None,
        })
    }

    pub fn from_profile(
        profile: Profile,
        input: (usize, usize, usize),
        actions: usize,
        head: Head,
        seed: u64,
    ) -> Result<Self> {
        QNet::new(input, profile.layers(actions, head), seed)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.input {
            Shape::Spatial { c, h, w } => (c, h, w),
            Shape::Flat(_) => unreachable!(),
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer, in order.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn num_actions(&self) -> usize {
        self.shapes.last().unwrap().size()
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn accumulators(&self) -> &[Option<Params>] {
        &self.accum
    }

    /// Mutable access for hand-built fixtures; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Copies parameters from `other` (same architecture) into `self`.
    pub fn copy_params_from(&mut self, other: &QNet) -> Result<()> {
        if self.layers != other.layers || self.input != other.input {
            return Err(Error::Usage("cannot copy parameters across architectures".into()));
        }
        self.params = other.params.clone();
        self.version += 1;
        Ok(())
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// The network description stored in checkpoints.
    pub fn spec_text(&self) -> String {
        let (c, h, w) = self.input_shape();
        let mut s = format!("input {c} {h} {w}\n");
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s.push_str(&format!(
            "rmsprop {} {} {}\n",
            self.optimizer.lr, self.optimizer.decay, self.optimizer.eps
        ));
        s
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let (c, h, w) = self.input_shape();
        match input.shape.as_slice() {
            [n, ic, ih, iw] if (*ic, *ih, *iw) == (c, h, w) => Ok(*n),
            [ic, ih, iw] if (*ic, *ih, *iw) == (c, h, w) => Ok(1),
            other => Err(Error::Dimension(format!(
                "network expects input [N, {c}, {h}, {w}], got {other:?}"
            ))),
        }
    }

    /// Q-values `[N, actions]` for a `[N, C, H, W]` (or `[C, H, W]`) input.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(input, false)?.0)
    }

    /// Forward pass keeping everything backward needs.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (q, cache) = self.forward_impl(input, true)?;
        Ok((q, cache.expect("cache requested")))
    }

    fn forward_impl(&self, input: &Tensor, keep: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        let n = self.check_input(input)?;
        let mut x: Cow<'_, [f64]> = Cow::Borrowed(&input.data);
        let mut cur = self.input;
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let out_shape = self.shapes[i];
            let (y, rec) = match *l {
                LayerSpec::Conv { filters, kernel } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (y, cols) = conv_forward(&x, n, cur, filters, kernel, p);
                    (y, Record::Conv { cols })
                }
                LayerSpec::MaxPool => {
                    let (y, arg) = pool_forward(&x, n, cur);
                    (y, Record::Pool { argmax: arg })
                }
                LayerSpec::Relu => {
                    let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    (y, Record::Relu)
                }
                LayerSpec::Dense { units } => {
                    let p = self.params[i].as_ref().unwrap();
                    (dense_forward(&x, n, cur.size(), units, p), Record::Dense)
                }
                LayerSpec::DuelingHead { actions } => {
                    let p = self.params[i].as_ref().unwrap();
                    let z = dense_forward(&x, n, cur.size(), actions + 1, p);
                    let mut q = Vec::with_capacity(n * actions);
                    for row in z.chunks_exact(actions + 1) {
                        q.extend(dueling_row(row[0], &row[1..]));
                    }
                    (q, Record::Dense)
                }
            };
            if keep {
                // convolution and pooling backward never read their input
                let saved = match rec {
                    Record::Conv { .. } | Record::Pool { .. } => Vec::new(),
                    _ => x.into_owned(),
                };
                records.push((saved, rec));
            }
            x = Cow::Owned(y);
            cur = out_shape;
        }
        let out = Tensor {
            shape: vec![n, cur.size()],
            data: x.into_owned(),
        };
        if !out.is_finite() {
            return Err(Error::Training("network produced non-finite Q-values".into()));
        }
        let cache = keep.then(|| ForwardCache {
            net_id: self.id,
            version: self.version,
            batch: n,
            records,
        });
        Ok((out, cache))
    }

    /// Gradients of `sum(output_grad * Q)` with respect to every parameter
    /// and the input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor) -> Result<GradientBundle> {
        self.backward_impl(cache, output_grad, true)
    }

    /// Like [`QNet::backward`] but skips the input gradient.
    pub fn backward_params(&self, cache: &ForwardCache, output_grad: &Tensor) -> Result<GradientBundle> {
        self.backward_impl(cache, output_grad, false)
    }

    fn backward_impl(&self, cache: &ForwardCache, output_grad: &Tensor, want_input: bool) -> Result<GradientBundle> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::Usage(
                "forward cache does not belong to this network state".into(),
            ));
        }
        let n = cache.batch;
        let a = self.num_actions();
        if output_grad.shape != [n, a] {
            return Err(Error::Dimension(format!(
                "output gradient must be [{n}, {a}], got {:?}",
                output_grad.shape
            )));
        }
        let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers.len()];
        let mut g = output_grad.data.clone();
        // lowest layer whose input gradient is needed
        let first_param = self.layers.iter().position(|l| l.has_params()).unwrap_or(0);
        for i in (0..self.layers.len()).rev() {
            let in_shape = if i == 0 { self.input } else { self.shapes[i - 1] };
            let (x, rec) = &cache.records[i];
            let need_dx = want_input || i > first_param;
            match (self.layers[i], rec) {
                (LayerSpec::Conv { filters, kernel }, Record::Conv { cols }) => {
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) =
                        conv_backward(&g, n, in_shape, self.shapes[i], filters, kernel, cols, p, need_dx);
                    grads[i] = Some((dw, db));
                    g = dx.unwrap_or_default();
                }
                (LayerSpec::MaxPool, Record::Pool { argmax }) => {
                    if need_dx {
                        let mut dx = vec![0.0; n * in_shape.size()];
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                        g = dx;
                    }
                }
                (LayerSpec::Relu, Record::Relu) => {
                    for (gv, &xv) in g.iter_mut().zip(x.iter()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                (LayerSpec::Dense { units }, Record::Dense) => {
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) = dense_backward(&g, x, n, in_shape.size(), units, p, need_dx, self.fault);
                    grads[i] = Some((dw, db));
                    g = dx.unwrap_or_default();
                }
                (LayerSpec::DuelingHead { actions }, Record::Dense) => {
                    let mut gz = Vec::with_capacity(n * (actions + 1));
                    for row in g.chunks_exact(actions) {
                        let mean = row.iter().sum::<f64>() / actions as f64;
                        gz.push(row.iter().sum::<f64>());
                        gz.extend(row.iter().map(|v| v - mean));
                    }
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) =
                        dense_backward(&gz, x, n, in_shape.size(), actions + 1, p, need_dx, self.fault);
                    grads[i] = Some((dw, db));
                    g = dx.unwrap_or_default();
                }
                _ => return Err(Error::Usage("forward cache does not match layer kinds".into())),
            }
            if !need_dx && i <= first_param {
                break;
            }
        }
        let input = if want_input {
            let (c, h, w) = self.input_shape();
            Some(Tensor {
                shape: vec![n, c, h, w],
                data: g,
            })
        } else {
            None
        };
        Ok(GradientBundle {
            params: grads,
            input,
        })
    }

    /// One RMSProp step with the network's optimizer settings.
    ///
    /// Fails without touching any parameter if a gradient is not finite.
    pub fn apply_gradients(&mut self, grads: &GradientBundle) -> Result<()> {
        for (i, g) in grads.params.iter().enumerate() {
            if let Some((dw, db)) = g {
                if !dw.is_finite() || !db.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient in layer {i}")));
                }
                let p = self.params[i]
                    .as_ref()
                    .ok_or_else(|| Error::Usage(format!("layer {i} has no parameters")))?;
                if p.weight.shape != dw.shape || p.bias.shape != db.shape {
                    return Err(Error::Dimension(format!("gradient shape mismatch in layer {i}")));
                }
            }
        }
        let opt = self.optimizer;
        for (i, g) in grads.params.iter().enumerate() {
            if let Some((dw, db)) = g {
                let p = self.params[i].as_mut().unwrap();
                let acc = self.accum[i].as_mut().unwrap();
                rmsprop_update(&mut p.weight.data, &dw.data, &mut acc.weight.data, opt);
                rmsprop_update(&mut p.bias.data, &db.data, &mut acc.bias.data, opt);
            }
        }
        self.step += 1;
        self.version += 1;
        Ok(())
    }

    /// Flat views over every parameter tensor (weights then bias per layer).
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.version += 1;
        let mut v = Vec::new();
        for p in self.params.iter_mut().flatten() {
            v.push(&mut p.weight.data);
            v.push(&mut p.bias.data);
        }
        v
    }
}

fn init_params(rng: &mut ChaCha8Rng, wshape: &[usize], nbias: usize, fan_in: usize, fan_out: usize) -> Params {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = wshape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Params {
        weight: Tensor {
            shape: wshape.to_vec(),
            data,
        },
        bias: Tensor::zeros(&[nbias]),
    }
}

/// `Q(a) = V + A(a) - mean(A)`.
pub fn dueling_combine(value: f64, advantages: &[f64]) -> Vec<f64> {
    dueling_row(value, advantages).collect()
}

fn dueling_row(value: f64, adv: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    adv.iter().map(move |a| value + a - mean)
}

/// Batched [`dueling_combine`]: `values` has one entry per row of the
/// `[N, A]` advantages.
pub fn dueling_combine_batch(values: &[f64], advantages: &Tensor) -> Result<Tensor> {
    let [n, a] = advantages.shape[..] else {
        return Err(Error::Dimension("advantages must be [N, A]".into()));
    };
    if values.len() != n {
        return Err(Error::Dimension(format!("{} values for {n} rows", values.len())));
    }
    let mut data = Vec::with_capacity(n * a);
    for (i, &v) in values.iter().enumerate() {
        data.extend(dueling_row(v, advantages.row(i)));
    }
    Tensor::from_vec(&[n, a], data)
}

#[derive(Debug, Clone)]
enum Record {
    Conv { cols: Vec<f64> },
    Pool { argmax: Vec<usize> },
    Relu,
    Dense,
}

/// Saved activations from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    batch: usize,
    /// Per layer: its input and any layer-specific record.
    records: Vec<(Vec<f64>, Record)>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Fingerprint of every ReLU on/off decision and pooling choice; two
    /// forward passes with equal patterns lie in the same linear region.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (x, rec) in &self.records {
            match rec {
                Record::Relu => {
                    let mut word = 0u64;
                    for (i, &v) in x.iter().enumerate() {
                        if v > 0.0 {
                            word ^= (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) | 1;
                        }
                        if i % 64 == 63 {
                            out.push(word);
                            word = 0;
                        }
                    }
                    out.push(word);
                }
                Record::Pool { argmax } => out.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `(weight, bias)` gradients for parameterized layers, `None` elsewhere.
    pub params: Vec<Option<(Tensor, Tensor)>>,
    /// `[N, C, H, W]` gradient with respect to the input, when requested.
    pub input: Option<Tensor>,
}

impl GradientBundle {
    pub fn is_zero(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|(w, b)| w.data.iter().chain(&b.data).all(|&v| v == 0.0))
            && self
                .input
                .as_ref()
                .is_none_or(|t| t.data.iter().all(|&v| v == 0.0))
    }
}

fn spatial(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Spatial { c, h, w } => (c, h, w),
        Shape::Flat(_) => unreachable!("spatial layer on flat input"),
    }
}

/// `c = a · b` for row-major matrices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents they describe.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Returns output `[N, F, OH, OW]` and the im2col matrix `[C·K·K, N·OH·OW]`.
fn conv_forward(x: &[f64], n: usize, shape: Shape, filters: usize, k: usize, p: &Params) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = spatial(shape);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let pix = oh * ow;
    let np = n * pix;
    let ckk = c * k * k;
    let mut cols = vec![0.0; ckk * np];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let src = &x[(b * c + ci) * h * w..];
                    for oy in 0..oh {
                        let s = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        dst[b * pix + oy * ow..b * pix + oy * ow + ow].copy_from_slice(s);
                    }
                }
            }
        }
    }
    let mut out_mat = vec![0.0; filters * np];
    gemm(filters, ckk, np, &p.weight.data, ckk as isize, 1, &cols, np as isize, 1, &mut out_mat, false);
    let mut y = vec![0.0; n * filters * pix];
    for f in 0..filters {
        let bias = p.bias.data[f];
        for b in 0..n {
            let src = &out_mat[f * np + b * pix..f * np + (b + 1) * pix];
            let dst = &mut y[(b * filters + f) * pix..(b * filters + f + 1) * pix];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    (y, cols)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &[f64],
    n: usize,
    in_shape: Shape,
    out_shape: Shape,
    filters: usize,
    k: usize,
    cols: &[f64],
    p: &Params,
    need_dx: bool,
) -> (Tensor, Tensor, Option<Vec<f64>>) {
    let (c, h, w) = spatial(in_shape);
    let (_, oh, ow) = spatial(out_shape);
    let pix = oh * ow;
    let np = n * pix;
    let ckk = c * k * k;
    // [F, N·P] layout of the incoming gradient
    let mut gmat = vec![0.0; filters * np];
    let mut db = vec![0.0; filters];
    for b in 0..n {
        for f in 0..filters {
            let src = &g[(b * filters + f) * pix..(b * filters + f + 1) * pix];
            gmat[f * np + b * pix..f * np + (b + 1) * pix].copy_from_slice(src);
        }
    }
    for f in 0..filters {
        db[f] = gmat[f * np..(f + 1) * np].iter().sum();
    }
    let mut dw = vec![0.0; filters * ckk];
    // dW = G · colsᵀ
    gemm(filters, np, ckk, &gmat, np as isize, 1, cols, 1, np as isize, &mut dw, false);
    let dx = need_dx.then(|| {
        // dcols = Wᵀ · G
        let mut dcols = vec![0.0; ckk * np];
        gemm(ckk, filters, np, &p.weight.data, 1, ckk as isize, &gmat, np as isize, 1, &mut dcols, false);
        let mut dx = vec![0.0; n * c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * np..(row + 1) * np];
                    for b in 0..n {
                        let dst = &mut dx[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..oh {
                            let d = &mut dst[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                            let s = &src[b * pix + oy * ow..b * pix + oy * ow + ow];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += sv;
                            }
                        }
                    }
                }
            }
        }
        dx
    });
    (
        Tensor {
            shape: p.weight.shape.clone(),
            data: dw,
        },
        Tensor {
            shape: vec![filters],
            data: db,
        },
        dx,
    )
}

fn pool_forward(x: &[f64], n: usize, shape: Shape) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = spatial(shape);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

fn dense_forward(x: &[f64], n: usize, inp: usize, out: usize, p: &Params) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    // Y = X · Wᵀ
    gemm(n, inp, out, x, inp as isize, 1, &p.weight.data, 1, inp as isize, &mut y, false);
    for row in y.chunks_exact_mut(out) {
        for (v, b) in row.iter_mut().zip(&p.bias.data) {
            *v += b;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    g: &[f64],
    x: &[f64],
    n: usize,
    inp: usize,
    out: usize,
    p: &Params,
    need_dx: bool,
    fault: Option<Fault>,
) -> (Tensor, Tensor, Option<Vec<f64>>) {
    let mut dw = vec![0.0; out * inp];
    // dW = Gᵀ · X
    gemm(out, n, inp, g, 1, out as isize, x, inp as isize, 1, &mut dw, false);
    let mut db = vec![0.0; out];
    for row in g.chunks_exact(out) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * inp];
        match fault {
            Some(Fault::TransposedDenseBackward) => {
                // reads W as if it were stored [inp, out]
                gemm(n, out, inp, g, out as isize, 1, &p.weight.data, 1, out as isize, &mut dx, false);
            }
            None => {
                // dX = G · W
                gemm(n, out, inp, g, out as isize, 1, &p.weight.data, inp as isize, 1, &mut dx, false);
            }
        }
        dx
    });
    (
        Tensor {
            shape: vec![out, inp],
            data: dw,
        },
        Tensor {
            shape: vec![out],
            data: db,
        },
        dx,
    )
}

#[cfg(test)]
mod tests;
