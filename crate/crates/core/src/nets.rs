//! Small classifiers (backbone + linear head) with named parameters and
//! per-layer batch-norm statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchId {
    Conv4,
    Resnet8,
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv4" => Ok(ArchId::Conv4),
            "resnet8" => Ok(ArchId::Resnet8),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchId::Conv4 => "conv4",
            ArchId::Resnet8 => "resnet8",
        })
    }
}

/// Architecture description. Two params built from equal specs always have
/// the same key set and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub arch: ArchId,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub width: f64,
}

impl ArchSpec {
    pub fn new(arch: ArchId, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch,
            input_shape,
            num_classes,
            width: 1.0,
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::Config(format!("width must be positive, got {}", self.width)));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("empty input shape {:?}", self.input_shape)));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    fn conv4_channels(&self) -> usize {
        self.scaled(32)
    }

    fn resnet_channels(&self) -> [usize; 3] {
        [self.scaled(16), self.scaled(32), self.scaled(64)]
    }

    /// Length of the backbone output (the embedding fed to the head).
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            ArchId::Conv4 => {
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for _ in 0..4 {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                self.conv4_channels() * h * w
            }
            ArchId::Resnet8 => self.resnet_channels()[2],
        }
    }

    /// Key-value text form, one `key = value` per line.
    pub fn to_kv(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!(
            "arch_id = {}\ninput_shape = {c},{h},{w}\nnum_classes = {}\nwidth_multiplier = {}\n",
            self.arch, self.num_classes, self.width
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad arch line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("arch spec missing `{k}`")))
        };
        let dims: Vec<usize> = get("input_shape")?
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad input_shape: {e}")))?;
        if dims.len() != 3 {
            return Err(Error::Format("input_shape needs three dimensions".into()));
        }
        let spec = ArchSpec {
            arch: get("arch_id")?.parse()?,
            input_shape: [dims[0], dims[1], dims[2]],
            num_classes: get("num_classes")?
                .parse()
                .map_err(|e| Error::Format(format!("bad num_classes: {e}")))?,
            width: get("width_multiplier")?
                .parse()
                .map_err(|e| Error::Format(format!("bad width_multiplier: {e}")))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Names and channel counts of batch-norm layers, in forward order.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.layout().bn
    }

    fn layout(&self) -> Layout {
        let mut l = Layout::default();
        let cin = self.input_shape[0];
        match self.arch {
            ArchId::Conv4 => {
                let c = self.conv4_channels();
                for i in 0..4 {
                    let ci = if i == 0 { cin } else { c };
                    l.conv(&format!("block{i}.conv"), ci, c, 3);
                    l.bn(&format!("block{i}.bn"), c);
                }
            }
            ArchId::Resnet8 => {
                let widths = self.resnet_channels();
                l.conv("stem.conv", cin, widths[0], 3);
                l.bn("stem.bn", widths[0]);
                let mut prev = widths[0];
                for (s, &c) in widths.iter().enumerate() {
                    l.conv(&format!("stage{s}.conv1"), prev, c, 3);
                    l.bn(&format!("stage{s}.bn1"), c);
                    l.conv(&format!("stage{s}.conv2"), c, c, 3);
                    l.bn(&format!("stage{s}.bn2"), c);
                    if prev != c {
                        l.conv(&format!("stage{s}.short.conv"), prev, c, 1);
                        l.bn(&format!("stage{s}.short.bn"), c);
                    }
                    prev = c;
                }
            }
        }
        let f = self.feature_dim();
        l.params
            .push((HEAD_WEIGHT.into(), vec![f, self.num_classes], Init::Uniform(f)));
        l.params
            .push((HEAD_BIAS.into(), vec![self.num_classes], Init::Uniform(f)));
        l
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Uniform(usize),
    Const(f64),
}

#[derive(Default)]
struct Layout {
    params: Vec<(String, Vec<usize>, Init)>,
    bn: Vec<(String, usize)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        self.params
            .push((format!("{name}.weight"), vec![cout, cin, k, k], Init::Uniform(fan_in)));
        self.params
            .push((format!("{name}.bias"), vec![cout], Init::Uniform(fan_in)));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push((format!("{name}.weight"), vec![c], Init::Const(1.0)));
        self.params.push((format!("{name}.bias"), vec![c], Init::Const(0.0)));
        self.bn.push((name.to_string(), c));
    }
}

pub fn running_mean_key(bn: &str) -> String {
    format!("{bn}.running_mean")
}

pub fn running_var_key(bn: &str) -> String {
    format!("{bn}.running_var")
}

/// Trainable parameters plus batch-norm buffers. Buffers are state and never
/// receive gradient updates.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub spec: ArchSpec,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Builds a freshly initialized network; deterministic in `(spec, seed)`.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape, init) in layout.params {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Uniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        params.insert(name, Tensor::new(shape, data));
    }
    let mut buffers = BTreeMap::new();
    for (bn, c) in layout.bn {
        buffers.insert(running_mean_key(&bn), Tensor::zeros(&[c]));
        buffers.insert(running_var_key(&bn), Tensor::full(&[c], 1.0));
    }
    Ok(NetworkParams {
        spec: spec.clone(),
        params,
        buffers,
    })
}

impl NetworkParams {
    /// Every parameter as a differentiable leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Every parameter as a constant.
    pub fn constants<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Replaces parameter values from recorded variables (same keys).
    pub fn with_values(&self, vars: &ParamVars<'_>) -> NetworkParams {
        let mut out = self.clone();
        for (k, v) in &vars.0 {
            out.params.insert(k.clone(), (*v.value()).clone());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and values of parameters and buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (section, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (k, v) in map {
                h.update(section.as_bytes());
                h.update(k.as_bytes());
                for d in v.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for x in v.data() {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rounds every value to `f32` precision, so in-memory and on-disk
    /// copies agree exactly.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut().chain(self.buffers.values_mut()) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Exponential moving average of batch statistics into the buffers.
    /// `counts[l]` is the number of values layer `l`'s statistics were
    /// measured over (used for the unbiased variance).
    pub fn update_running_stats(&mut self, means: &[Tensor], vars: &[Tensor], counts: &[usize]) -> Result<()> {
        let layers = self.spec.bn_layers();
        if layers.len() != means.len() || layers.len() != vars.len() || layers.len() != counts.len() {
            return Err(Error::Internal("batch-norm layer count mismatch".into()));
        }
        for (((name, _), (m, v)), &count) in layers.iter().zip(means.iter().zip(vars)).zip(counts) {
            let unbias = if count > 1 {
                count as f64 / (count as f64 - 1.0)
            } else {
                1.0
            };
            let rm = self.buffers.get_mut(&running_mean_key(name)).expect("buffer");
            for (r, x) in rm.data_mut().iter_mut().zip(m.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
            let rv = self.buffers.get_mut(&running_var_key(name)).expect("buffer");
            for (r, x) in rv.data_mut().iter_mut().zip(v.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x * unbias;
            }
        }
        Ok(())
    }
}

/// Named parameter variables on one tape.
#[derive(Clone, Default)]
pub struct ParamVars<'t>(pub BTreeMap<String, Var<'t>>);

impl<'t> FromIterator<(String, Var<'t>)> for ParamVars<'t> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'t>)>>(iter: I) -> Self {
        ParamVars(iter.into_iter().collect())
    }
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.0.values().copied().collect()
    }

    /// Variables whose name is not in the head.
    pub fn backbone_names(&self) -> Vec<String> {
        self.0.keys().filter(|k| !k.starts_with("head.")).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    BatchStats,
    RunningStats,
}

/// Recorded outputs of a forward pass.
pub struct TraceVars<'t> {
    pub logits: Var<'t>,
    pub embedding: Var<'t>,
    pub bn_means: Vec<Var<'t>>,
    pub bn_vars: Vec<Var<'t>>,
    /// Values each layer's statistics were measured over (B·H·W).
    pub bn_counts: Vec<usize>,
}

impl TraceVars<'_> {
    /// Batch statistics as plain values: (means, variances, counts).
    pub fn batch_stats(&self) -> (Vec<Tensor>, Vec<Tensor>, Vec<usize>) {
        let val = |v: &Var<'_>| (*v.value()).clone();
        (
            self.bn_means.iter().map(val).collect(),
            self.bn_vars.iter().map(val).collect(),
            self.bn_counts.clone(),
        )
    }
}

/// Recorded outputs of the backbone alone.
pub struct BackboneVars<'t> {
    pub embedding: Var<'t>,
    pub bn_means: Vec<Var<'t>>,
    pub bn_vars: Vec<Var<'t>>,
    pub bn_counts: Vec<usize>,
}

/// Plain-value forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub embedding: Tensor,
    pub bn_means: Vec<Tensor>,
    pub bn_vars: Vec<Tensor>,
    pub bn_counts: Vec<usize>,
}

fn check_input(spec: &ArchSpec, shape: &[usize], mode: BnMode) -> Result<()> {
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        return Err(Error::Input(format!(
            "expected images [B,{},{},{}], got {shape:?}",
            spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
        )));
    }
    if shape[0] == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if shape[0] < 2 && mode == BnMode::BatchStats {
        return Err(Error::Input("batch statistics need at least two images".into()));
    }
    Ok(())
}

struct BnCtx<'a, 't> {
    params: &'a ParamVars<'t>,
    buffers: &'a BTreeMap<String, Tensor>,
    mode: BnMode,
    means: Vec<Var<'t>>,
    vars: Vec<Var<'t>>,
    counts: Vec<usize>,
}

impl<'t> BnCtx<'_, 't> {
    fn conv(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        let y = x.conv2d(w);
        let shape = y.shape();
        Ok(y + b.broadcast_axis(1, &shape))
    }

    fn bn(&mut self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let shape = x.shape();
        let n = (shape[0] * shape[2] * shape[3]) as f64;
        let mean = x.reduce_axis(1) * (1.0 / n);
        let centered = x - mean.broadcast_axis(1, &shape);
        let var = (centered * centered).reduce_axis(1) * (1.0 / n);
        self.means.push(mean);
        self.vars.push(var);
        self.counts.push(n as usize);
        let normed = match self.mode {
            BnMode::BatchStats => {
                let inv = var.add_scalar(BN_EPS).powf(-0.5);
                centered * inv.broadcast_axis(1, &shape)
            }
            BnMode::RunningStats => {
                let get = |k: String| {
                    self.buffers
                        .get(&k)
                        .cloned()
                        .ok_or_else(|| Error::Internal(format!("missing buffer `{k}`")))
                };
                let rm = get(running_mean_key(name))?;
                let rv = get(running_var_key(name))?.map(|v| 1.0 / (v + BN_EPS).sqrt());
                let shift = tape.constant(rm).broadcast_axis(1, &shape);
                let scale = tape.constant(rv).broadcast_axis(1, &shape);
                (x - shift) * scale
            }
        };
        let gamma = self.params.get(&format!("{name}.weight"))?;
        let beta = self.params.get(&format!("{name}.bias"))?;
        Ok(normed * gamma.broadcast_axis(1, &shape) + beta.broadcast_axis(1, &shape))
    }
}

/// Runs the backbone only; the head parameters may be absent.
pub fn backbone_vars<'t>(
    spec: &ArchSpec,
    params: &ParamVars<'t>,
    buffers: &BTreeMap<String, Tensor>,
    images: Var<'t>,
    mode: BnMode,
) -> Result<BackboneVars<'t>> {
    check_input(spec, &images.shape(), mode)?;
    let mut ctx = BnCtx {
        params,
        buffers,
        mode,
        means: Vec::new(),
        vars: Vec::new(),
        counts: Vec::new(),
    };
    let batch = images.shape()[0];
    let features = match spec.arch {
        ArchId::Conv4 => {
            let mut x = images;
            for i in 0..4 {
                x = ctx.conv(&format!("block{i}.conv"), x)?;
                x = ctx.bn(&format!("block{i}.bn"), x)?.relu().maxpool2x2();
            }
            x
        }
        ArchId::Resnet8 => {
            let mut x = ctx.conv("stem.conv", images)?;
            x = ctx.bn("stem.bn", x)?.relu();
            let widths = spec.resnet_channels();
            let mut prev = widths[0];
            for (s, &c) in widths.iter().enumerate() {
                let mut y = ctx.conv(&format!("stage{s}.conv1"), x)?;
                y = ctx.bn(&format!("stage{s}.bn1"), y)?.relu();
                y = ctx.conv(&format!("stage{s}.conv2"), y)?;
                y = ctx.bn(&format!("stage{s}.bn2"), y)?;
                let short = if prev != c {
                    let z = ctx.conv(&format!("stage{s}.short.conv"), x)?;
                    ctx.bn(&format!("stage{s}.short.bn"), z)?
                } else {
                    x
                };
                x = (y + short).relu().maxpool2x2();
                prev = c;
            }
            // global average pool
            let shape = x.shape();
            let hw = shape[2] * shape[3];
            x.reshape(&[shape[0] * shape[1], hw])
                .reduce_axis(0)
                .reshape(&[shape[0], shape[1]])
                * (1.0 / hw as f64)
        }
    };
    let f = spec.feature_dim();
    Ok(BackboneVars {
        embedding: features.reshape(&[batch, f]),
        bn_means: ctx.means,
        bn_vars: ctx.vars,
        bn_counts: ctx.counts,
    })
}

/// Linear head: `embedding · W + b`.
pub fn head_vars<'t>(embedding: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let y = embedding.matmul(weight);
    let shape = y.shape();
    y + bias.broadcast_axis(1, &shape)
}

/// Full forward pass on recorded parameters.
pub fn forward_vars<'t>(
    spec: &ArchSpec,
    params: &ParamVars<'t>,
    buffers: &BTreeMap<String, Tensor>,
    images: Var<'t>,
    mode: BnMode,
) -> Result<TraceVars<'t>> {
    let bb = backbone_vars(spec, params, buffers, images, mode)?;
    let logits = head_vars(bb.embedding, params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?);
    Ok(TraceVars {
        logits,
        embedding: bb.embedding,
        bn_means: bb.bn_means,
        bn_vars: bb.bn_vars,
        bn_counts: bb.bn_counts,
    })
}

/// Plain-value forward pass. Pure in `(params, images, mode)`.
pub fn forward(params: &NetworkParams, images: &Tensor, mode: BnMode) -> Result<ForwardTrace> {
    let tape = Tape::new();
    let vars = params.constants(&tape);
    let x = tape.constant(images.clone());
    let t = forward_vars(&params.spec, &vars, &params.buffers, x, mode)?;
    let val = |v: &Var<'_>| (*v.value()).clone();
    Ok(ForwardTrace {
        logits: val(&t.logits),
        embedding: val(&t.embedding),
        bn_means: t.bn_means.iter().map(val).collect(),
        bn_vars: t.bn_vars.iter().map(val).collect(),
        bn_counts: t.bn_counts,
    })
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn conv4(classes: usize, hw: usize) -> ArchSpec {
        ArchSpec::new(ArchId::Conv4, [3, hw, hw], classes).with_width(0.25)
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn build_is_deterministic() {
        let spec = conv4(5, 16);
        assert_eq!(build_network(&spec, 0).unwrap(), build_network(&spec, 0).unwrap());
        assert_ne!(build_network(&spec, 0).unwrap(), build_network(&spec, 1).unwrap());
    }

    #[test]
    fn head_shape_matches_classes() {
        let spec = ArchSpec::new(ArchId::Conv4, [3, 16, 16], 5);
        let p = build_network(&spec, 0).unwrap();
        assert_eq!(p.params[HEAD_WEIGHT].shape(), &[spec.feature_dim(), 5]);
        assert_eq!(spec.feature_dim(), 32);
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!("vgg".parse::<ArchId>(), Err(Error::Config(_))));
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = ArchSpec::new(ArchId::Conv4, [3, 8, 8], 1);
        assert!(matches!(build_network(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_stable_over_seeds() {
        for spec in [
            conv4(3, 16),
            ArchSpec::new(ArchId::Resnet8, [3, 16, 16], 3).with_width(0.25),
        ] {
            let reference = build_network(&spec, 0).unwrap();
            for seed in 1..10 {
                let p = build_network(&spec, seed).unwrap();
                let a: Vec<_> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
                let b: Vec<_> = p.params.iter().map(|(k, v)| (k, v.shape())).collect();
                assert_eq!(a, b);
                assert_eq!(
                    reference.buffers.keys().collect::<Vec<_>>(),
                    p.buffers.keys().collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn buffers_start_at_identity() {
        let p = build_network(&conv4(2, 8), 3).unwrap();
        for (k, v) in &p.buffers {
            let want = if k.ends_with("running_mean") { 0.0 } else { 1.0 };
            assert!(v.data().iter().all(|&x| x == want));
        }
    }

    #[test]
    fn single_image_batch_stats_rejected() {
        let p = build_network(&conv4(2, 8), 0).unwrap();
        let x = noise(&[1, 3, 8, 8], 1);
        assert!(matches!(forward(&p, &x, BnMode::BatchStats), Err(Error::Input(_))));
        assert!(forward(&p, &x, BnMode::RunningStats).is_ok());
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let p = build_network(&conv4(2, 8), 0).unwrap();
        let x = noise(&[2, 1, 8, 8], 1);
        assert!(matches!(forward(&p, &x, BnMode::RunningStats), Err(Error::Input(_))));
    }

    #[test]
    fn forward_is_pure_and_reports_all_layers() {
        for spec in [
            conv4(2, 8),
            ArchSpec::new(ArchId::Resnet8, [3, 8, 8], 2).with_width(0.25),
        ] {
            let p = build_network(&spec, 4).unwrap();
            let x = noise(&[3, 3, 8, 8], 2);
            let a = forward(&p, &x, BnMode::BatchStats).unwrap();
            let b = forward(&p, &x, BnMode::BatchStats).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.bn_means.len(), spec.bn_layers().len());
            assert_eq!(a.logits.shape(), &[3, 2]);
            assert_eq!(a.embedding.shape(), &[3, spec.feature_dim()]);
            for v in &a.bn_vars {
                assert!(v.data().iter().all(|&s| s >= 0.0));
            }
            let r = forward(&p, &x, BnMode::RunningStats).unwrap();
            assert_eq!(r.bn_means.len(), a.bn_means.len());
            // The first layer sees the raw images, so its statistics cannot
            // depend on how earlier layers were normalized.
            assert_eq!(r.bn_means[0], a.bn_means[0]);
            assert_eq!(r.bn_vars[0], a.bn_vars[0]);
        }
    }

    #[test]
    fn zero_input_first_bn_mean_is_conv_bias() {
        let spec = ArchSpec::new(ArchId::Conv4, [2, 4, 4], 2).with_width(0.125);
        let p = build_network(&spec, 9).unwrap();
        let x = Tensor::zeros(&[2, 2, 4, 4]);
        let t = forward(&p, &x, BnMode::BatchStats).unwrap();
        // Hand-rolled convolution of an all-zero 4x4 image: every output pixel
        // is the bias, so the channel mean over batch and space is the bias.
        let w = &p.params["block0.conv.weight"];
        let b = &p.params["block0.conv.bias"];
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        for o in 0..co {
            let mut total = 0.0;
            for img in 0..2usize {
                for y in 0..4i64 {
                    for xx in 0..4i64 {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                        let px = x.data()[((img * ci + c) * 4 + sy as usize) * 4 + sx as usize];
                                        acc += px * w.data()[((o * ci + c) * 3 + ky as usize) * 3 + kx as usize];
                                    }
                                }
                            }
                        }
                        total += acc;
                    }
                }
            }
            let mean = total / 32.0;
            assert!((t.bn_means[0].data()[o] - mean).abs() < 1e-15);
            assert!(t.bn_vars[0].data()[o].abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let l = Tensor::new(vec![3, 2], vec![2.0, 1.0, 1.0, 1.0, 0.0, 3.0]);
        assert_eq!(argmax_rows(&l), vec![0, 0, 1]);
    }

    #[test]
    fn running_stat_update_uses_momentum_and_unbiased_variance() {
        let spec = ArchSpec::new(ArchId::Conv4, [1, 2, 2], 2).with_width(1.0 / 32.0);
        let mut p = build_network(&spec, 0).unwrap();
        let m = vec![Tensor::full(&[1], 2.0); 4];
        let v = vec![Tensor::full(&[1], 3.0); 4];
        p.update_running_stats(&m, &v, &[4; 4]).unwrap();
        let rm = p.buffers["block0.bn.running_mean"].item();
        let rv = p.buffers["block0.bn.running_var"].item();
        assert!((rm - 0.2).abs() < 1e-15);
        assert!((rv - (0.9 + 0.1 * 3.0 * 4.0 / 3.0)).abs() < 1e-15);
    }
}
