//! The searchable architecture space: a stack of wide dense layers whose
//! hidden dimensions can be switched off per layer, plus compact SubNet
//! extraction and exact parameter / FLOP accounting.

use sha2::{Digest, Sha256};

use crate::diffcore::rng::{streams, RngStream};
use crate::diffcore::{affine_kernel, Activation, Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SuperNetConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Maximum width of each hidden layer; its length is the layer count L.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl SuperNetConfig {
    /// `layers` hidden layers of identical width.
    pub fn uniform(input_dim: usize, num_classes: usize, layers: usize, width: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            widths: vec![width; layers],
            activation: Activation::Relu,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("SuperNet needs at least one hidden layer".into()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w < 2) {
            return Err(Error::Config(format!("hidden width {w} < 2")));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("input_dim must be ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if self.activation != Activation::Relu {
            return Err(Error::Config("hidden activation must be relu".into()));
        }
        Ok(())
    }
}

/// One fully connected layer: `weight` is (in × out).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    /// He-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        Self {
            weight: Parameter::new(Tensor::matrix(fan_in, fan_out, data).expect("shape")),
            bias: Parameter::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        affine_kernel(x, &self.weight.value, &self.bias.value)
    }

    /// Keeps rows `rows` and columns `cols` of the weight and `cols` of the bias.
    fn slice(&self, rows: &[usize], cols: &[usize]) -> Dense {
        let w = &self.weight.value;
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                data.push(w.at(r, c));
            }
        }
        let bias = cols.iter().map(|&c| self.bias.value.data()[c]).collect();
        Dense {
            weight: Parameter::new(Tensor::matrix(rows.len(), cols.len(), data).expect("shape")),
            bias: Parameter::new(Tensor::vector(bias)),
        }
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Binary selection over the hidden dimensions of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerMask {
    layer: usize,
    bits: Vec<bool>,
    k: usize,
}

impl LayerMask {
    pub fn new(layer: usize, bits: Vec<bool>) -> Result<Self> {
        let k = bits.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(Error::Range(format!("layer {layer} mask retains 0 dimensions")));
        }
        Ok(Self { layer, bits, k })
    }

    pub fn ones(layer: usize, width: usize) -> Self {
        Self {
            layer,
            bits: vec![true; width],
            k: width,
        }
    }

    pub fn from_indices(layer: usize, width: usize, retained: &[usize]) -> Result<Self> {
        let mut bits = vec![false; width];
        for &i in retained {
            if i >= width {
                return Err(Error::Index {
                    context: "mask index",
                    index: i,
                    bound: width,
                });
            }
            bits[i] = true;
        }
        Self::new(layer, bits)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn retained(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Hex bitmask, most significant digit first; dimension `i` is bit `i`.
    pub fn to_hex(&self) -> String {
        let digits = self.bits.len().div_ceil(4);
        (0..digits)
            .rev()
            .map(|d| {
                let nibble = (0..4).fold(0u32, |acc, b| {
                    let i = d * 4 + b;
                    acc | (u32::from(self.bits.get(i).copied().unwrap_or(false)) << b)
                });
                char::from_digit(nibble, 16).expect("nibble")
            })
            .collect()
    }

    pub fn from_hex(layer: usize, width: usize, hex: &str) -> Result<Self> {
        let digits: Vec<u32> = hex
            .trim()
            .chars()
            .map(|c| c.to_digit(16).ok_or_else(|| Error::Input(format!("bad hex digit {c:?}"))))
            .collect::<Result<_>>()?;
        if digits.len() != width.div_ceil(4) {
            return Err(Error::Input(format!(
                "mask for width {width} needs {} hex digits, got {}",
                width.div_ceil(4),
                digits.len()
            )));
        }
        let mut bits = vec![false; width];
        for (pos, nibble) in digits.iter().rev().enumerate() {
            for b in 0..4 {
                let i = pos * 4 + b;
                let set = nibble >> b & 1 == 1;
                if i >= width {
                    if set {
                        return Err(Error::Input("mask sets bits beyond width".into()));
                    }
                } else {
                    bits[i] = set;
                }
            }
        }
        Self::new(layer, bits)
    }
}

/// Per-layer retain fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceConstraint {
    pub fractions: Vec<f64>,
}

impl ResourceConstraint {
    pub fn uniform(fraction: f64, layers: usize) -> Result<Self> {
        let c = Self {
            fractions: vec![fraction; layers],
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for &c in &self.fractions {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Range(format!("constraint {c} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Retained counts for the given layer widths.
    pub fn counts(&self, widths: &[usize]) -> Vec<usize> {
        self.fractions
            .iter()
            .zip(widths)
            .map(|(&c, &w)| retain_count(c, w))
            .collect()
    }
}

/// `max(1, round(c · width))`.
pub fn retain_count(fraction: f64, width: usize) -> usize {
    ((fraction * width as f64).round() as usize).clamp(1, width)
}

/// Output of a plain masked forward.
#[derive(Clone, Debug)]
pub struct MaskedForward {
    pub logits: Tensor,
    /// Post-activation, post-mask hidden features of every layer.
    pub activations: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet {
    pub config: SuperNetConfig,
    pub layers: Vec<Dense>,
    pub head: Dense,
}

impl SuperNet {
    pub fn new(config: SuperNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut fan_in = config.input_dim;
        let mut layers = Vec::with_capacity(config.widths.len());
        for &w in &config.widths {
            layers.push(Dense::init(fan_in, w, &mut rng));
            fan_in = w;
        }
        let head = Dense::init(fan_in, config.num_classes, &mut rng);
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.config.widths
    }

    pub fn full_masks(&self) -> Vec<LayerMask> {
        self.widths()
            .iter()
            .enumerate()
            .map(|(l, &w)| LayerMask::ones(l, w))
            .collect()
    }

    pub fn validate_masks(&self, masks: &[LayerMask]) -> Result<()> {
        if masks.len() != self.num_layers() {
            return Err(Error::dims("mask count", &[masks.len()], &[self.num_layers()]));
        }
        for (m, &w) in masks.iter().zip(self.widths()) {
            if m.width() != w {
                return Err(Error::dims("mask length", &[m.width()], &[w]));
            }
        }
        Ok(())
    }

    /// Forward pass with each hidden layer's activations multiplied by a row
    /// vector (`None` = keep everything).
    pub fn forward_scaled(&self, multipliers: &[Option<&[f64]>], batch: &Tensor) -> Result<MaskedForward> {
        let mut h = batch.clone();
        let mut activations = Vec::with_capacity(self.layers.len());
        for (layer, mult) in self.layers.iter().zip(multipliers) {
            let mut z = layer.forward(&h)?.map(|v| v.max(0.0));
            if let Some(m) = mult {
                for r in 0..z.rows() {
                    for (v, &b) in z.row_mut(r).iter_mut().zip(m.iter()) {
                        *v *= b;
                    }
                }
            }
            activations.push(z.clone());
            h = z;
        }
        let logits = self.head.forward(&h)?;
        Ok(MaskedForward {
            logits,
            activations,
        })
    }

    /// Forward with hidden features zeroed wherever the layer mask is 0.
    pub fn forward_masked(&self, masks: &[LayerMask], batch: &Tensor) -> Result<MaskedForward> {
        self.validate_masks(masks)?;
        if batch.cols() != self.config.input_dim {
            return Err(Error::dims("forward input", batch.shape(), &[self.config.input_dim]));
        }
        let mults: Vec<Vec<f64>> = masks.iter().map(LayerMask::as_f64).collect();
        let refs: Vec<Option<&[f64]>> = mults.iter().map(|m| Some(m.as_slice())).collect();
        self.forward_scaled(&refs, batch)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<MaskedForward> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::dims("forward input", batch.shape(), &[self.config.input_dim]));
        }
        let none = vec![None; self.layers.len()];
        self.forward_scaled(&none, batch)
    }

    /// Differentiable forward. `vars` comes from [`Module::bind`]; each mask
    /// var (when present) is a length-W row multiplier.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        masks: &[Option<Var>],
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut acts = Vec::with_capacity(self.layers.len());
        for (l, mask) in masks.iter().enumerate().take(self.layers.len()) {
            let z = tape.affine(h, vars[2 * l], vars[2 * l + 1])?;
            let mut a = tape.relu(z);
            if let Some(m) = mask {
                a = tape.mul_row(a, *m)?;
            }
            acts.push(a);
            h = a;
        }
        let n = self.layers.len();
        let logits = tape.affine(h, vars[2 * n], vars[2 * n + 1])?;
        Ok((logits, acts))
    }

    /// SHA-256 of all parameter values, truncated to 64 bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl Module for SuperNet {
    fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(Dense::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(Dense::params_mut)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub supernet_checksum: u64,
    pub constraint: f64,
    pub seed: u64,
}

/// Compact network carved from a SuperNet by slicing the retained dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNet {
    pub layers: Vec<Dense>,
    pub head: Dense,
    pub masks: Vec<LayerMask>,
    pub provenance: Provenance,
}

impl SubNet {
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut h = batch.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.map(|v| v.max(0.0));
        }
        self.head.forward(&h)
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers.len() {
            let z = tape.affine(h, vars[2 * l], vars[2 * l + 1])?;
            h = tape.relu(z);
        }
        let n = self.layers.len();
        tape.affine(h, vars[2 * n], vars[2 * n + 1])
    }

    pub fn param_count(&self) -> u64 {
        self.num_scalars() as u64
    }

    pub fn flops(&self) -> u64 {
        self.layers
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|d| layer_flops(d.in_dim(), d.out_dim()))
            .sum()
    }
}

impl Module for SubNet {
    fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(Dense::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(Dense::params_mut)
            .collect()
    }
}

/// Slices inherited weights: layer `l` keeps rows selected by mask `l−1`
/// (all inputs for the first layer) and columns selected by mask `l`.
pub fn extract_subnet(net: &SuperNet, masks: &[LayerMask], provenance: Provenance) -> Result<SubNet> {
    net.validate_masks(masks)?;
    let mut rows: Vec<usize> = (0..net.config.input_dim).collect();
    let mut layers = Vec::with_capacity(masks.len());
    for (layer, mask) in net.layers.iter().zip(masks) {
        let cols = mask.retained();
        layers.push(layer.slice(&rows, &cols));
        rows = cols;
    }
    let head_cols: Vec<usize> = (0..net.config.num_classes).collect();
    let head = net.head.slice(&rows, &head_cols);
    Ok(SubNet {
        layers,
        head,
        masks: masks.to_vec(),
        provenance,
    })
}

fn retained_counts(net: &SuperNet, masks: Option<&[LayerMask]>) -> Result<Vec<usize>> {
    match masks {
        Some(m) => {
            net.validate_masks(m)?;
            Ok(m.iter().map(LayerMask::k).collect())
        }
        None => Ok(net.widths().to_vec()),
    }
}

/// Retained weights of every dense block (hidden layers then head), given masks.
pub fn weight_counts(net: &SuperNet, masks: Option<&[LayerMask]>) -> Result<Vec<u64>> {
    let ks = retained_counts(net, masks)?;
    let mut fan_in = net.config.input_dim as u64;
    let mut out = Vec::with_capacity(ks.len() + 1);
    for &k in &ks {
        out.push(fan_in * k as u64);
        fan_in = k as u64;
    }
    out.push(fan_in * net.config.num_classes as u64);
    Ok(out)
}

/// Retained weights plus retained biases.
pub fn count_params(net: &SuperNet, masks: Option<&[LayerMask]>) -> Result<u64> {
    let ks = retained_counts(net, masks)?;
    let weights: u64 = weight_counts(net, masks)?.iter().sum();
    let biases: u64 = ks.iter().map(|&k| k as u64).sum::<u64>() + net.config.num_classes as u64;
    Ok(weights + biases)
}

/// Multiply–add FLOPs of one dense block.
pub fn layer_flops(k_in: usize, k_out: usize) -> u64 {
    2 * k_in as u64 * k_out as u64
}

pub fn count_flops(net: &SuperNet, masks: Option<&[LayerMask]>) -> Result<u64> {
    Ok(2 * weight_counts(net, masks)?.iter().sum::<u64>())
}

/// Per-dimension summary of a layer's activations: mean, population std,
/// mean absolute value and fraction of strictly positive entries (W × 4).
pub fn layer_features(activations: &Tensor) -> Result<Tensor> {
    let b = activations.rows();
    if activations.shape().len() != 2 || b < 2 {
        return Err(Error::InsufficientBatch { got: b, need: 2 });
    }
    let w = activations.cols();
    let means = activations.column_means();
    let stds = activations.column_stds(&means);
    let mut abs = vec![0.0; w];
    let mut active = vec![0.0; w];
    for r in 0..b {
        for (j, &v) in activations.row(r).iter().enumerate() {
            abs[j] += v.abs();
            if v > 0.0 {
                active[j] += 1.0;
            }
        }
    }
    let mut data = Vec::with_capacity(w * 4);
    for j in 0..w {
        data.extend_from_slice(&[means[j], stds[j], abs[j] / b as f64, active[j] / b as f64]);
    }
    Tensor::matrix(w, 4, data)
}

pub const FEATURE_STATS: usize = 4;
