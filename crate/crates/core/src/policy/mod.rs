//! Softmax allocation policy with two sub-networks.
//!
//! Sub-network 1 reads the stacked return and volatility layers, sub-network 2
//! reads the context matrix. Their flattened outputs are concatenated, passed
//! through one rectified dense layer and a dense output layer of size `l`, then
//! a softmax. Each sub-network is either a convolution stack over the lag axis
//! or a single gated recurrent cell stepping along it.

mod io;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureConfig, Observation, DERIVED_CONTEXT_ROWS};

pub use io::{load_policy, read_policy, save_policy, write_policy};
pub use layers::{softmax, GruCell};
use layers::{softmax_backward, Conv1d, Dense, GruStep};

pub const DEFAULT_SEED: u64 = 12345;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(alias = "cnn")]
    Convolutional,
    #[serde(alias = "lstm", alias = "gru", alias = "rnn")]
    Recurrent,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Convolutional => "cnn",
            Variant::Recurrent => "recurrent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Output channels of each convolution in sub-network 1.
    pub subnet1_channels: Vec<usize>,
    /// Output channels of each convolution in sub-network 2.
    pub subnet2_channels: Vec<usize>,
    /// Stride of the i-th convolution (shared by both sub-networks; 1 past the end).
    pub strides: Vec<usize>,
    /// Kernel width of the i-th convolution, clamped to the input length.
    pub kernel_sizes: Vec<usize>,
    /// Width of the rectified merge layer.
    pub hidden: usize,
    /// Number of hedging strategies `l`.
    pub strategies: usize,
    /// Without context, sub-network 2 is dropped entirely.
    pub use_context: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Convolutional,
            subnet1_channels: vec![5, 10],
            subnet2_channels: vec![2],
            strides: vec![2, 1],
            kernel_sizes: vec![3, 3],
            hidden: 16,
            strategies: 4,
            use_context: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subnet1_channels.is_empty() || self.subnet2_channels.is_empty() {
            return Err(invalid("channel lists must be nonempty"));
        }
        if self
            .subnet1_channels
            .iter()
            .chain(&self.subnet2_channels)
            .any(|&c| c == 0)
        {
            return Err(invalid("channel counts must be positive"));
        }
        if self.strides.contains(&0) {
            return Err(invalid("strides must be positive"));
        }
        if self.kernel_sizes.contains(&0) {
            return Err(invalid("kernel sizes must be positive"));
        }
        if self.hidden == 0 {
            return Err(invalid("merge width must be positive"));
        }
        if self.strategies < 2 {
            return Err(invalid("need at least two strategies"));
        }
        Ok(())
    }

    fn stride(&self, i: usize) -> usize {
        self.strides.get(i).copied().unwrap_or(1)
    }

    fn kernel(&self, i: usize) -> usize {
        self.kernel_sizes.get(i).copied().unwrap_or(3)
    }
}

/// Dimensions of the observation the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub strategies: usize,
    pub asset_lags: usize,
    pub context_rows: usize,
    pub context_lags: usize,
}

impl InputShape {
    pub fn new(strategies: usize, raw_context: usize, features: &FeatureConfig) -> Self {
        Self {
            strategies,
            asset_lags: features.asset_lags.len(),
            context_rows: raw_context + DERIVED_CONTEXT_ROWS,
            context_lags: features.context_lags.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named index ranges covering the flat parameter vector exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    slots: Vec<LayerSlot>,
}

impl Layout {
    fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.total();
        self.slots.push(LayerSlot {
            name: name.into(),
            offset,
            len,
        });
        offset
    }

    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len)
    }

    /// The slot holding flat index `i`, and the position inside it.
    pub fn locate(&self, i: usize) -> Option<(&LayerSlot, usize)> {
        self.slots
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .map(|s| (s, i - s.offset))
    }

    pub fn slot(&self, name: &str) -> Option<&LayerSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat trainable weights plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub values: Vec<f64>,
    layout: Layout,
}

impl PolicyParams {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(invalid(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot_values(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .slot(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn slot_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.slot(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Fails on the first non-finite entry, naming its layer.
    pub fn check_finite(&self) -> Result<()> {
        check_finite_in(&self.values, &self.layout)
    }
}

pub(crate) fn check_finite_in(values: &[f64], layout: &Layout) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => {
            let (slot, within) = layout.locate(i).expect("index inside layout");
            Err(Error::NonFinite {
                layer: slot.name.clone(),
                index: within,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Subnet {
    Conv { rows: usize, layers: Vec<Conv1d> },
    Recurrent(GruCell),
}

impl Subnet {
    fn out_size(&self) -> usize {
        match self {
            Subnet::Conv { rows, layers } => rows * layers.last().unwrap().out_size(),
            Subnet::Recurrent(cell) => cell.hidden,
        }
    }
}

#[derive(Debug, Clone)]
enum SubnetCache {
    Conv {
        inputs: Vec<Vec<f64>>,
        pres: Vec<Vec<f64>>,
    },
    Recurrent(Vec<GruStep>),
}

#[derive(Debug, Clone)]
struct ForwardCache {
    s1: SubnetCache,
    s2: Option<SubnetCache>,
    concat: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
}

/// Activations recorded by [`Policy::forward_recorded`], consumed by [`Policy::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    caches: Vec<ForwardCache>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn clear(&mut self) {
        self.caches.clear();
    }
}

/// Network architecture bound to an input shape. Weights live in [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: NetworkConfig,
    shape: InputShape,
    subnet1: Subnet,
    subnet2: Option<Subnet>,
    merge: Dense,
    output: Dense,
    layout: Layout,
}

impl Policy {
    pub fn new(config: NetworkConfig, shape: InputShape) -> Result<Self> {
        config.validate()?;
        if shape.strategies != config.strategies {
            return Err(invalid(format!(
                "network expects {} strategies, observations carry {}",
                config.strategies, shape.strategies
            )));
        }
        if shape.asset_lags == 0 || shape.context_lags == 0 {
            return Err(invalid("lag sets must be nonempty"));
        }
        let mut layout = Layout::default();
        let subnet1 = match config.variant {
            Variant::Convolutional => {
                let mut layers = Vec::new();
                let (mut ch, mut len) = (2, shape.asset_lags);
                for (i, &out) in config.subnet1_channels.iter().enumerate() {
                    let probe = Conv1d::new(ch, out, config.kernel(i), config.stride(i), len, 0);
                    let off = layout.push(format!("subnet1.conv{i}.weight"), probe.weight_len());
                    layout.push(format!("subnet1.conv{i}.bias"), out);
                    let conv = Conv1d::new(ch, out, config.kernel(i), config.stride(i), len, off);
                    (ch, len) = (out, conv.out_len);
                    layers.push(conv);
                }
                Subnet::Conv {
                    rows: shape.strategies,
                    layers,
                }
            }
            Variant::Recurrent => {
                let hidden = *config.subnet1_channels.last().unwrap();
                Subnet::Recurrent(push_gru(
                    &mut layout,
                    "subnet1",
                    2 * shape.strategies,
                    hidden,
                ))
            }
        };
        let subnet2 = if config.use_context {
            Some(match config.variant {
                Variant::Convolutional => {
                    let mut layers = Vec::new();
                    let (mut ch, mut len) = (shape.context_rows, shape.context_lags);
                    for (i, &out) in config.subnet2_channels.iter().enumerate() {
                        let probe = Conv1d::new(ch, out, config.kernel(i), config.stride(i), len, 0);
                        let off =
                            layout.push(format!("subnet2.conv{i}.weight"), probe.weight_len());
                        layout.push(format!("subnet2.conv{i}.bias"), out);
                        let conv =
                            Conv1d::new(ch, out, config.kernel(i), config.stride(i), len, off);
                        (ch, len) = (out, conv.out_len);
                        layers.push(conv);
                    }
                    Subnet::Conv { rows: 1, layers }
                }
                Variant::Recurrent => {
                    let hidden = *config.subnet2_channels.last().unwrap();
                    Subnet::Recurrent(push_gru(&mut layout, "subnet2", shape.context_rows, hidden))
                }
            })
        } else {
            None
        };
        let concat = subnet1.out_size() + subnet2.as_ref().map_or(0, Subnet::out_size);
        let off = layout.push("merge.weight", concat * config.hidden);
        layout.push("merge.bias", config.hidden);
        let merge = Dense::new(concat, config.hidden, off);
        let off = layout.push("output.weight", config.hidden * config.strategies);
        layout.push("output.bias", config.strategies);
        let output = Dense::new(config.hidden, config.strategies, off);
        Ok(Self {
            config,
            shape,
            subnet1,
            subnet2,
            merge,
            output,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    /// Recurrent cells of the two sub-networks, when the variant is recurrent.
    pub fn recurrent_cells(&self) -> Option<(&GruCell, Option<&GruCell>)> {
        let s1 = match &self.subnet1 {
            Subnet::Recurrent(c) => c,
            Subnet::Conv { .. } => return None,
        };
        let s2 = match &self.subnet2 {
            Some(Subnet::Recurrent(c)) => Some(c),
            _ => None,
        };
        Some((s1, s2))
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero; deterministic per seed.
    pub fn init_params(&self, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total()];
        for slot in self.layout.slots() {
            if slot.name.ends_with("bias") {
                continue;
            }
            let fan_in = self.fan_in(&slot.name);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[slot.offset..slot.offset + slot.len] {
                *v = rng.random_range(-bound..bound);
            }
        }
        PolicyParams {
            values,
            layout: self.layout.clone(),
        }
    }

    fn fan_in(&self, slot: &str) -> usize {
        let conv_fan = |net: &Subnet| -> usize {
            let idx: usize = slot
                .split('.')
                .nth(1)
                .and_then(|s| s.strip_prefix("conv"))
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            match net {
                Subnet::Conv { layers, .. } => layers[idx].in_ch * layers[idx].kernel,
                Subnet::Recurrent(cell) => {
                    if slot.ends_with("recurrent_weight") {
                        cell.hidden
                    } else {
                        cell.inputs
                    }
                }
            }
        };
        if slot.starts_with("subnet1") {
            conv_fan(&self.subnet1)
        } else if slot.starts_with("subnet2") {
            conv_fan(self.subnet2.as_ref().expect("subnet2 slot without subnet2"))
        } else if slot.starts_with("merge") {
            self.merge.inputs
        } else {
            self.output.inputs
        }
    }

    fn check_shape(&self, params: &PolicyParams, obs: &Observation) -> Result<()> {
        if params.values.len() != self.layout.total() {
            return Err(invalid(format!(
                "parameter vector of length {}, network needs {}",
                params.values.len(),
                self.layout.total()
            )));
        }
        let s = &self.shape;
        let ok = obs.returns.rows() == s.strategies
            && obs.returns.cols() == s.asset_lags
            && obs.vols.rows() == s.strategies
            && obs.vols.cols() == s.asset_lags
            && (!self.config.use_context
                || (obs.context.rows() == s.context_rows && obs.context.cols() == s.context_lags));
        if !ok {
            return Err(invalid(format!(
                "observation shape {}x{} / {}x{} does not match network input {s:?}",
                obs.returns.rows(),
                obs.returns.cols(),
                obs.context.rows(),
                obs.context.cols()
            )));
        }
        Ok(())
    }

    /// Allocation weights for one observation.
    pub fn forward(&self, params: &PolicyParams, obs: &Observation) -> Result<Vec<f64>> {
        self.check_shape(params, obs)?;
        Ok(self.forward_cache(&params.values, obs).weights)
    }

    /// Like [`forward`](Self::forward) but records activations for [`backward`](Self::backward).
    pub fn forward_recorded(
        &self,
        params: &PolicyParams,
        obs: &Observation,
        tape: &mut Tape,
    ) -> Result<Vec<f64>> {
        self.check_shape(params, obs)?;
        let cache = self.forward_cache(&params.values, obs);
        let w = cache.weights.clone();
        tape.caches.push(cache);
        Ok(w)
    }

    /// Flattened outputs of sub-network 1 and (if present) sub-network 2.
    pub fn subnet_outputs(
        &self,
        params: &PolicyParams,
        obs: &Observation,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_shape(params, obs)?;
        let p = &params.values;
        let (o1, _) = self.subnet_forward(&self.subnet1, p, obs, true);
        let o2 = self
            .subnet2
            .as_ref()
            .map(|s| self.subnet_forward(s, p, obs, false).0);
        Ok((o1, o2))
    }

    fn forward_cache(&self, p: &[f64], obs: &Observation) -> ForwardCache {
        let (o1, s1) = self.subnet_forward(&self.subnet1, p, obs, true);
        let mut concat = o1;
        let s2 = self.subnet2.as_ref().map(|s| {
            let (o2, c) = self.subnet_forward(s, p, obs, false);
            concat.extend_from_slice(&o2);
            c
        });
        let mut hidden_pre = vec![0.0; self.merge.outputs];
        self.merge.forward(p, &concat, &mut hidden_pre);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut logits = vec![0.0; self.output.outputs];
        self.output.forward(p, &hidden, &mut logits);
        let weights = softmax(&logits);
        ForwardCache {
            s1,
            s2,
            concat,
            hidden_pre,
            hidden,
            weights,
        }
    }

    fn subnet_forward(
        &self,
        net: &Subnet,
        p: &[f64],
        obs: &Observation,
        first: bool,
    ) -> (Vec<f64>, SubnetCache) {
        match net {
            Subnet::Conv { rows, layers } => {
                let mut x = if first {
                    // [strategy][channel][lag]
                    let mut x = Vec::with_capacity(rows * 2 * self.shape.asset_lags);
                    for k in 0..*rows {
                        x.extend_from_slice(obs.returns.row(k));
                        x.extend_from_slice(obs.vols.row(k));
                    }
                    x
                } else {
                    obs.context.as_slice().to_vec()
                };
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pres = Vec::with_capacity(layers.len());
                for conv in layers {
                    let (ins, outs) = (conv.in_size(), conv.out_size());
                    let mut pre = vec![0.0; rows * outs];
                    for r in 0..*rows {
                        conv.forward(p, &x[r * ins..(r + 1) * ins], &mut pre[r * outs..(r + 1) * outs]);
                    }
                    let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                    inputs.push(std::mem::replace(&mut x, post));
                    pres.push(pre);
                }
                (x, SubnetCache::Conv { inputs, pres })
            }
            Subnet::Recurrent(cell) => {
                let seq = recurrent_sequence(obs, first);
                let mut h = vec![0.0; cell.hidden];
                let mut steps = Vec::with_capacity(seq.len());
                for x in &seq {
                    let (h_new, s) = cell.step_cached(p, x, &h);
                    steps.push(s);
                    h = h_new;
                }
                (h, SubnetCache::Recurrent(steps))
            }
        }
    }

    fn subnet_backward(&self, net: &Subnet, p: &[f64], cache: &SubnetCache, dout: &[f64], grad: &mut [f64]) {
        match (net, cache) {
            (Subnet::Conv { rows, layers }, SubnetCache::Conv { inputs, pres }) => {
                let mut dpost = dout.to_vec();
                for (li, conv) in layers.iter().enumerate().rev() {
                    let (ins, outs) = (conv.in_size(), conv.out_size());
                    let pre = &pres[li];
                    let dpre: Vec<f64> = dpost
                        .iter()
                        .zip(pre)
                        .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                        .collect();
                    let x = &inputs[li];
                    let mut dx = if li > 0 { vec![0.0; rows * ins] } else { Vec::new() };
                    for r in 0..*rows {
                        let dxr = if li > 0 {
                            Some(&mut dx[r * ins..(r + 1) * ins])
                        } else {
                            None
                        };
                        conv.backward(
                            p,
                            &x[r * ins..(r + 1) * ins],
                            &dpre[r * outs..(r + 1) * outs],
                            grad,
                            dxr,
                        );
                    }
                    dpost = dx;
                }
            }
            (Subnet::Recurrent(cell), SubnetCache::Recurrent(steps)) => {
                let mut dh = dout.to_vec();
                for s in steps.iter().rev() {
                    dh = cell.step_backward(p, s, &dh, grad);
                }
            }
            _ => unreachable!("cache does not match sub-network kind"),
        }
    }

    /// Gradient of `sum_t <output_grads[t], weights_t>` w.r.t. every parameter,
    /// where `weights_t` is the t-th recorded forward pass.
    pub fn backward(&self, params: &PolicyParams, tape: &Tape, output_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tape.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if tape.len() != output_grads.len() {
            return Err(Error::State(format!(
                "tape holds {} forward passes but {} output gradients were given",
                tape.len(),
                output_grads.len()
            )));
        }
        let p = &params.values;
        let mut grad = vec![0.0; p.len()];
        for (cache, g) in tape.caches.iter().zip(output_grads) {
            if g.len() != self.config.strategies {
                return Err(invalid("output gradient has wrong length"));
            }
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dlogits = softmax_backward(&cache.weights, g);
            let mut dhidden = vec![0.0; self.merge.outputs];
            self.output.backward(p, &cache.hidden, &dlogits, &mut grad, &mut dhidden);
            for (d, &z) in dhidden.iter_mut().zip(&cache.hidden_pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut dconcat = vec![0.0; self.merge.inputs];
            self.merge.backward(p, &cache.concat, &dhidden, &mut grad, &mut dconcat);
            let n1 = self.subnet1.out_size();
            self.subnet_backward(&self.subnet1, p, &cache.s1, &dconcat[..n1], &mut grad);
            if let (Some(net), Some(c)) = (&self.subnet2, &cache.s2) {
                self.subnet_backward(net, p, c, &dconcat[n1..], &mut grad);
            }
        }
        Ok(grad)
    }
}

fn push_gru(layout: &mut Layout, prefix: &str, inputs: usize, hidden: usize) -> GruCell {
    let off = layout.push(format!("{prefix}.gru.input_weight"), 3 * hidden * inputs);
    layout.push(format!("{prefix}.gru.recurrent_weight"), 3 * hidden * hidden);
    layout.push(format!("{prefix}.gru.bias"), 3 * hidden);
    GruCell::new(inputs, hidden, off)
}

/// Per-lag inputs of a recurrent sub-network, in lag-column order.
///
/// Sub-network 1 sees `[returns[.., a], vols[.., a]]`; sub-network 2 sees `context[.., a]`.
pub fn recurrent_sequence(obs: &Observation, asset_layers: bool) -> Vec<Vec<f64>> {
    if asset_layers {
        (0..obs.returns.cols())
            .map(|a| {
                (0..obs.returns.rows())
                    .map(|k| obs.returns.get(k, a))
                    .chain((0..obs.vols.rows()).map(|k| obs.vols.get(k, a)))
                    .collect()
            })
            .collect()
    } else {
        (0..obs.context.cols())
            .map(|a| (0..obs.context.rows()).map(|i| obs.context.get(i, a)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests;
