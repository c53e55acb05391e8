//! 2D U-Net segmentation models and their layer groups.
//!
//! Two variants share one graph executor:
//!
//! * `residual_unet`: pre-activation residual blocks (BN, ReLU, 3x3 conv,
//!   twice, plus identity) on every level, max-pool downsampling followed by
//!   a channel-doubling conv, nearest upsampling followed by a
//!   channel-halving conv, and 1x1 skip convs merged by summation.
//! * `vanilla_unet`: two conv + ReLU layers per level, no normalization, and
//!   skips merged by channel concatenation.
//!
//! Level `l` has `base_filters * 2^l` channels. Layer groups are taken along
//! the main path in forward order, skip convs excluded: `first` is the first
//! three conv layers, `last` the last three (the output head included) and
//! `all` every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use layershift_core::rng::seeded;
use layershift_core::volume::{Mask, Slice2D, Volume};

use crate::error::{NnError, Result};
use crate::layers::{
    concat, maxpool2, maxpool2_backward, split_channels, upsample2, upsample2_backward, BatchNorm,
    Conv2d, ConvLayer, LayerCache, LayerKind,
};
use crate::params::{ParamId, ParamStore, TensorKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layers per group at each end of the network.
pub const GROUP_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ResidualUnet,
    VanillaUnet,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::ResidualUnet, Variant::VanillaUnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ResidualUnet => "residual_unet",
            Variant::VanillaUnet => "vanilla_unet",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| NnError::invalid(format!("unsupported variant {s:?}; expected residual_unet or vanilla_unet")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of resolution levels.
    pub depth: usize,
    pub base_filters: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
}

fn one() -> usize {
    1
}

/// Residual U-Net, 4 levels, 16 filters at the first level.
impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::new(Variant::ResidualUnet, 4, 16)
    }
}

impl ModelSpec {
    pub fn new(variant: Variant, depth: usize, base_filters: usize) -> Self {
        ModelSpec {
            variant,
            depth,
            base_filters,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.depth) {
            return Err(NnError::invalid(format!("depth must be in 2..=8, got {}", self.depth)));
        }
        if self.base_filters == 0 {
            return Err(NnError::invalid("base_filters must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(NnError::invalid("in_channels must be >= 1"));
        }
        if self.out_channels != 1 {
            return Err(NnError::invalid(format!(
                "binary segmentation needs out_channels == 1, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupName {
    First,
    Last,
    All,
}

impl GroupName {
    pub const ALL: [GroupName; 3] = [GroupName::First, GroupName::Last, GroupName::All];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::First => "first",
            GroupName::Last => "last",
            GroupName::All => "all",
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        GroupName::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NnError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: GroupName,
    /// Layer names in forward order.
    pub layers: Vec<String>,
    /// Names of the learnable tensors owned by those layers.
    pub parameter_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Input,
    Layer { layer: usize, src: usize },
    MaxPool { src: usize },
    Upsample { src: usize },
    Add { a: usize, b: usize },
    Concat { a: usize, b: usize },
}

impl Node {
    fn sources(self) -> Vec<usize> {
        match self {
            Node::Input => vec![],
            Node::Layer { src, .. } | Node::MaxPool { src } | Node::Upsample { src } => vec![src],
            Node::Add { a, b } | Node::Concat { a, b } => vec![a, b],
        }
    }
}

/// Builds layers, tensors and the node graph for a spec.
struct Builder<'r, T, R: Rng> {
    params: ParamStore<T>,
    layers: Vec<ConvLayer>,
    main_path: Vec<usize>,
    nodes: Vec<Node>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn node(&mut self, n: Node) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BatchNorm {
        let p = &mut self.params;
        BatchNorm {
            channels: c,
            scale: p.add(format!("{prefix}.bn.scale"), TensorKind::BnScale, vec![c], vec![T::one(); c]),
            shift: p.add(format!("{prefix}.bn.shift"), TensorKind::BnShift, vec![c], vec![T::zero(); c]),
            running_mean: p.add(format!("{prefix}.bn.running_mean"), TensorKind::BnRunningMean, vec![c], vec![T::zero(); c]),
            running_var: p.add(format!("{prefix}.bn.running_var"), TensorKind::BnRunningVar, vec![c], vec![T::one(); c]),
        }
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Conv2d {
        let fan_in = c_in * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let w: Vec<T> = (0..c_out * fan_in).map(|_| T::from_f64(normal.sample(self.rng))).collect();
        let weight = self.params.add(format!("{prefix}.conv.weight"), TensorKind::ConvWeight, vec![c_out, c_in, k, k], w);
        let bias = bias.then(|| {
            self.params
                .add(format!("{prefix}.conv.bias"), TensorKind::ConvBias, vec![c_out], vec![T::zero(); c_out])
        });
        Conv2d {
            c_in,
            c_out,
            k,
            weight,
            bias,
        }
    }

    /// Adds a layer node; `main` layers count towards the layer groups.
    fn layer(&mut self, name: &str, kind: LayerKind, c_in: usize, c_out: usize, k: usize, src: usize, main: bool) -> usize {
        let bias = matches!(kind, LayerKind::ConvRelu | LayerKind::Conv);
        let bn = match kind {
            LayerKind::PreAct => Some(self.bn(name, c_in)),
            _ => None,
        };
        let conv = self.conv(name, c_in, c_out, k, bias);
        let bn = match kind {
            LayerKind::ConvBn => Some(self.bn(name, c_out)),
            _ => bn,
        };
        self.layers.push(ConvLayer {
            name: name.to_string(),
            kind,
            conv,
            bn,
        });
        let layer = self.layers.len() - 1;
        if main {
            self.main_path.push(layer);
        }
        self.node(Node::Layer { layer, src })
    }

    fn res_block(&mut self, prefix: &str, c: usize, src: usize) -> usize {
        let a = self.layer(&format!("{prefix}.a"), LayerKind::PreAct, c, c, 3, src, true);
        let b = self.layer(&format!("{prefix}.b"), LayerKind::PreAct, c, c, 3, a, true);
        self.node(Node::Add { a: src, b })
    }

    fn residual(&mut self, s: &ModelSpec) {
        let input = self.node(Node::Input);
        let mut x = self.layer("stem", LayerKind::ConvBn, s.in_channels, s.channels(0), 3, input, true);
        x = self.res_block("enc0", s.channels(0), x);
        let mut skips = vec![x];
        for l in 1..s.depth {
            let p = self.node(Node::MaxPool { src: x });
            let d = self.layer(&format!("down{l}"), LayerKind::PreAct, s.channels(l - 1), s.channels(l), 3, p, true);
            x = self.res_block(&format!("enc{l}"), s.channels(l), d);
            skips.push(x);
        }
        for l in (0..s.depth - 1).rev() {
            let u = self.node(Node::Upsample { src: x });
            let up = self.layer(&format!("up{l}"), LayerKind::PreAct, s.channels(l + 1), s.channels(l), 3, u, true);
            let sk = self.layer(&format!("skip{l}"), LayerKind::Conv, s.channels(l), s.channels(l), 1, skips[l], false);
            let merged = self.node(Node::Add { a: up, b: sk });
            x = self.res_block(&format!("dec{l}"), s.channels(l), merged);
        }
        self.layer("head", LayerKind::PreAct, s.channels(0), s.out_channels, 3, x, true);
    }

    fn vanilla(&mut self, s: &ModelSpec) {
        let input = self.node(Node::Input);
        let mut x = input;
        let mut skips = Vec::new();
        for l in 0..s.depth {
            if l > 0 {
                x = self.node(Node::MaxPool { src: x });
            }
            let c_in = if l == 0 { s.in_channels } else { s.channels(l - 1) };
            x = self.layer(&format!("enc{l}.a"), LayerKind::ConvRelu, c_in, s.channels(l), 3, x, true);
            x = self.layer(&format!("enc{l}.b"), LayerKind::ConvRelu, s.channels(l), s.channels(l), 3, x, true);
            skips.push(x);
        }
        for l in (0..s.depth - 1).rev() {
            let u = self.node(Node::Upsample { src: x });
            let up = self.layer(&format!("up{l}"), LayerKind::ConvRelu, s.channels(l + 1), s.channels(l), 3, u, true);
            let cat = self.node(Node::Concat { a: skips[l], b: up });
            x = self.layer(&format!("dec{l}.a"), LayerKind::ConvRelu, 2 * s.channels(l), s.channels(l), 3, cat, true);
            x = self.layer(&format!("dec{l}.b"), LayerKind::ConvRelu, s.channels(l), s.channels(l), 3, x, true);
        }
        self.layer("head", LayerKind::Conv, s.channels(0), s.out_channels, 1, x, true);
    }
}

/// Intermediate state of a training forward pass, consumed by `backward`.
pub struct Tape<T> {
    layer_caches: Vec<Option<LayerCache<T>>>,
    pool_args: Vec<Option<(Vec<u8>, usize, usize)>>,
    concat_split: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel<T = f32> {
    spec: ModelSpec,
    params: ParamStore<T>,
    layers: Vec<ConvLayer>,
    main_path: Vec<usize>,
    nodes: Vec<Node>,
    last_use: Vec<usize>,
}

impl<T: Scalar> SegmentationModel<T> {
    /// Builds a freshly initialized model (Kaiming-normal conv weights, unit
    /// BN scale, zero shifts and biases) from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            layers: Vec::new(),
            main_path: Vec::new(),
            nodes: Vec::new(),
            rng: &mut rng,
        };
        match spec.variant {
            Variant::ResidualUnet => b.residual(&spec),
            Variant::VanillaUnet => b.vanilla(&spec),
        }
        let Builder {
            params,
            layers,
            main_path,
            nodes,
            ..
        } = b;
        let mut last_use: Vec<usize> = (0..nodes.len()).collect();
        for (i, n) in nodes.iter().enumerate() {
            for s in n.sources() {
                last_use[s] = last_use[s].max(i);
            }
        }
        Ok(SegmentationModel {
            spec,
            params,
            layers,
            main_path,
            nodes,
            last_use,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Main-path layer names in forward order.
    pub fn main_path(&self) -> Vec<&str> {
        self.main_path.iter().map(|&i| self.layers[i].name.as_str()).collect()
    }

    fn group_layers(&self, g: GroupName) -> Vec<usize> {
        match g {
            GroupName::First => self.main_path[..GROUP_DEPTH].to_vec(),
            GroupName::Last => self.main_path[self.main_path.len() - GROUP_DEPTH..].to_vec(),
            GroupName::All => (0..self.layers.len()).collect(),
        }
    }

    pub fn group_param_ids(&self, g: GroupName) -> Vec<ParamId> {
        self.group_layers(g)
            .into_iter()
            .flat_map(|l| self.layers[l].learnable_ids())
            .collect()
    }

    /// Learnable tensors plus normalization buffers of the group's layers.
    pub fn group_tensor_ids(&self, g: GroupName) -> Vec<ParamId> {
        self.group_layers(g)
            .into_iter()
            .flat_map(|l| self.layers[l].tensor_ids())
            .collect()
    }

    pub fn layer_group(&self, g: GroupName) -> LayerGroup {
        let layers = self.group_layers(g);
        LayerGroup {
            name: g,
            layers: layers.iter().map(|&l| self.layers[l].name.clone()).collect(),
            parameter_ids: layers
                .iter()
                .flat_map(|&l| self.layers[l].learnable_ids())
                .map(|id| self.params.get(id).name.clone())
                .collect(),
        }
    }

    pub fn layer_groups(&self) -> BTreeMap<GroupName, LayerGroup> {
        GroupName::ALL.into_iter().map(|g| (g, self.layer_group(g))).collect()
    }

    /// Learnable parameter elements in a group.
    pub fn parameter_count(&self, g: GroupName) -> usize {
        self.group_param_ids(g).into_iter().map(|id| self.params.get(id).len()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for id in 0..self.params.len() {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Learnable tensors in layers of `g` become trainable, all others frozen.
    pub fn train_only(&mut self, g: GroupName) {
        self.set_all_trainable(false);
        for id in self.group_param_ids(g) {
            self.params.set_trainable(id, true);
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_elements()
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.spec.size_multiple();
        if x.n == 0 || x.c != self.spec.in_channels || x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(NnError::Shape(format!(
                "input {:?} needs {} channel(s) and spatial sizes divisible by {m}",
                x.dims(),
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Inference pass; returns per-pixel foreground logits `(N, 1, H, W)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, &node) in self.nodes.iter().enumerate() {
            let v = match node {
                Node::Input => x.clone(),
                Node::Layer { layer, src } => self.layers[layer].forward(&self.params, val(&values, src)),
                Node::MaxPool { src } => maxpool2(val(&values, src)).0,
                Node::Upsample { src } => upsample2(val(&values, src)),
                Node::Add { a, b } => {
                    let mut t = val(&values, a).clone();
                    t.add_assign(val(&values, b));
                    t
                }
                Node::Concat { a, b } => concat(val(&values, a), val(&values, b)),
            };
            values[i] = Some(v);
            self.release(&mut values, i);
        }
        Ok(values.pop().flatten().expect("output node"))
    }

    /// Drops node values whose last consumer is `i`.
    fn release(&self, values: &mut [Option<Tensor<T>>], i: usize) {
        for s in self.nodes[i].sources() {
            if self.last_use[s] == i {
                values[s] = None;
            }
        }
    }

    /// Training pass; trainable BN layers use batch statistics and update
    /// their running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut tape = Tape {
            layer_caches: (0..n).map(|_| None).collect(),
            pool_args: vec![None; n],
            concat_split: vec![None; n],
        };
        for i in 0..n {
            let v = match self.nodes[i] {
                Node::Input => x.clone(),
                Node::Layer { layer, src } => {
                    let (y, cache) = self.layers[layer].forward_train(&mut self.params, val(&values, src));
                    tape.layer_caches[i] = Some(cache);
                    y
                }
                Node::MaxPool { src } => {
                    let s = val(&values, src);
                    let (y, arg) = maxpool2(s);
                    tape.pool_args[i] = Some((arg, s.h, s.w));
                    y
                }
                Node::Upsample { src } => upsample2(val(&values, src)),
                Node::Add { a, b } => {
                    let mut t = val(&values, a).clone();
                    t.add_assign(val(&values, b));
                    t
                }
                Node::Concat { a, b } => {
                    tape.concat_split[i] = Some(val(&values, a).c);
                    concat(val(&values, a), val(&values, b))
                }
            };
            values[i] = Some(v);
            self.release(&mut values, i);
        }
        Ok((values.pop().flatten().expect("output node"), tape))
    }

    /// Back-propagates `dlogits` and accumulates gradients into trainable
    /// tensors. Work upstream of the last trainable layer is skipped.
    pub fn backward(&mut self, tape: Tape<T>, dlogits: Tensor<T>) -> Result<()> {
        let n = self.nodes.len();
        // whether any trainable tensor lies upstream of (or at) each node
        let mut upstream = vec![false; n];
        for i in 0..n {
            upstream[i] = match self.nodes[i] {
                Node::Layer { layer, src } => upstream[src] || self.layers[layer].has_trainable(&self.params),
                other => other.sources().iter().any(|&s| upstream[s]),
            };
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(dlogits);
        let Tape {
            layer_caches,
            pool_args,
            concat_split,
        } = tape;
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !upstream[i] {
                continue;
            }
            match self.nodes[i] {
                Node::Input => {}
                Node::Layer { layer, src } => {
                    let cache = layer_caches[i].as_ref().expect("tape from forward_train");
                    if let Some(dx) = self.layers[layer].backward(&mut self.params, cache, g, upstream[src]) {
                        add_grad(&mut grads, src, dx);
                    }
                }
                Node::MaxPool { src } => {
                    let (arg, h, w) = pool_args[i].as_ref().expect("tape from forward_train");
                    add_grad(&mut grads, src, maxpool2_backward(&g, arg, *h, *w));
                }
                Node::Upsample { src } => add_grad(&mut grads, src, upsample2_backward(&g)),
                Node::Add { a, b } => {
                    if upstream[b] {
                        add_grad(&mut grads, b, g.clone());
                    }
                    add_grad(&mut grads, a, g);
                }
                Node::Concat { a, b } => {
                    let (ga, gb) = split_channels(&g, concat_split[i].expect("tape from forward_train"));
                    add_grad(&mut grads, a, ga);
                    add_grad(&mut grads, b, gb);
                }
            }
        }
        Ok(())
    }

    /// Foreground logits for a stack of equally sized slices.
    pub fn predict_slices(&self, slices: &[Slice2D]) -> Result<Tensor<T>> {
        let x = stack_slices(slices)?;
        self.forward(&x)
    }

    /// Segments a volume slice by slice along the axial axis. Slices are
    /// zero-padded to a valid size and the prediction cropped back.
    pub fn predict_volume(&self, volume: &Volume, batch: usize) -> Result<Mask> {
        let [nx, ny, nz] = volume.shape();
        let m = self.spec.size_multiple();
        let (hp, wp) = (nx.div_ceil(m) * m, ny.div_ceil(m) * m);
        let mut scores = vec![0.0f32; nx * ny * nz];
        let batch = batch.max(1);
        for z0 in (0..nz).step_by(batch) {
            let zs: Vec<usize> = (z0..(z0 + batch).min(nz)).collect();
            let mut data = vec![T::zero(); zs.len() * hp * wp];
            for (k, &z) in zs.iter().enumerate() {
                for x in 0..nx {
                    for y in 0..ny {
                        data[k * hp * wp + x * wp + y] = T::from_f64(volume.get(x, y, z) as f64);
                    }
                }
            }
            let logits = self.forward(&Tensor::from_vec(zs.len(), 1, hp, wp, data)?)?;
            for (k, &z) in zs.iter().enumerate() {
                for x in 0..nx {
                    for y in 0..ny {
                        scores[(x * ny + y) * nz + z] = logits.data[k * hp * wp + x * wp + y].as_f64() as f32;
                    }
                }
            }
        }
        Ok(Mask::from_scores(*volume.geometry(), &scores, 0.0)?)
    }
}

fn val<T>(values: &[Option<Tensor<T>>], i: usize) -> &Tensor<T> {
    values[i].as_ref().expect("node value still alive")
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Stacks single-channel slices into an `(N, 1, H, W)` tensor.
pub fn stack_slices<T: Scalar>(slices: &[Slice2D]) -> Result<Tensor<T>> {
    let first = slices.first().ok_or_else(|| NnError::invalid("no slices to stack"))?;
    let (h, w) = (first.rows, first.cols);
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if (s.rows, s.cols) != (h, w) {
            return Err(NnError::Shape(format!(
                "slice {}x{} differs from {}x{}",
                s.rows, s.cols, h, w
            )));
        }
        data.extend(s.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(slices.len(), 1, h, w, data)
}
