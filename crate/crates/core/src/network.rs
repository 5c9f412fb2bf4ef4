//! Sequential CT networks: architecture specs, seeded construction,
//! end-to-end forward in hard or soft mode, and batch evaluation.
//!
//! A network is a chain of CT layers and average poolings ending in a
//! flat feature vector of one entry per class. Softmax never lives in
//! the network itself — losses and evaluation re-temperature the raw
//! logits as they see fit, so `forward` returns them untouched.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{cost_cnn, memory_model, CostReport, LayerDims, Precision};
use crate::error::{CtError, Result};
use crate::fern::{SoftConfig, WordCalculator};
use crate::layer::{forward_hard, forward_hard_serial, forward_soft, ConvTable, CtLayerConfig, VotingTable};
use crate::tensor::{avg_pool, PadMode, PadSpec, Tensor3};

/// One architecture row: a CT layer, a pooling, or the trailing softmax
/// marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Ct { l: usize, k: usize, m: usize, d_out: usize, stride: usize, pad: PadSpec },
    AvgPool { l: usize, stride: usize },
    Softmax,
}

impl LayerSpec {
    pub fn ct(l: usize, k: usize, m: usize, d_out: usize) -> Self {
        LayerSpec::Ct { l, k, m, d_out, stride: 1, pad: PadSpec::valid() }
    }

    pub fn avg_pool(l: usize) -> Self {
        LayerSpec::AvgPool { l, stride: 1 }
    }
}

/// Input geometry, the layer chain, and the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Output shape of every layer, or the first failing layer.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Ct { l, k, m, d_out, stride, pad } => {
                    if m == 0 || d_out == 0 {
                        return Err(CtError::BuildError { index, reason: "M and d_out must be positive".into() });
                    }
                    if k == 0 || k > crate::fern::MAX_BITS {
                        return Err(CtError::BuildError { index, reason: format!("K={k} out of range") });
                    }
                    if l % 2 == 0 {
                        return Err(CtError::BuildError { index, reason: format!("patch size l={l} must be odd") });
                    }
                    let oh = pad.output_extent(shape.0, l, stride).map_err(|e| CtError::BuildError {
                        index,
                        reason: e.to_string(),
                    })?;
                    let ow = pad.output_extent(shape.1, l, stride).map_err(|e| CtError::BuildError {
                        index,
                        reason: e.to_string(),
                    })?;
                    (oh, ow, d_out)
                }
                LayerSpec::AvgPool { l, stride } => {
                    if l > shape.0 || l > shape.1 {
                        return Err(CtError::BuildError {
                            index,
                            reason: format!("pooling window {l} exceeds input {}x{}", shape.0, shape.1),
                        });
                    }
                    ((shape.0 - l) / stride + 1, (shape.1 - l) / stride + 1, shape.2)
                }
                LayerSpec::Softmax => {
                    if index + 1 != self.layers.len() {
                        return Err(CtError::BuildError { index, reason: "softmax must be the final layer".into() });
                    }
                    shape
                }
            };
            out.push(shape);
        }
        let final_shape = out.last().copied().unwrap_or(self.input);
        if final_shape.0 * final_shape.1 * final_shape.2 != self.classes {
            return Err(CtError::BuildError {
                index: self.layers.len().saturating_sub(1),
                reason: format!(
                    "final feature vector has {} entries but the spec declares {} classes",
                    final_shape.0 * final_shape.1 * final_shape.2,
                    self.classes
                ),
            });
        }
        Ok(out)
    }

    /// Two CT layers for 28x28 grayscale digits: CT(l=9,K=10,M=10,100),
    /// pool 7, CT(l=9,K=10,M=10,10), pool 6.
    pub fn two_layer_mnist() -> Self {
        NetworkSpec {
            input: (28, 28, 1),
            layers: vec![
                LayerSpec::ct(9, 10, 10, 100),
                LayerSpec::avg_pool(7),
                LayerSpec::ct(9, 10, 10, 10),
                LayerSpec::avg_pool(6),
                LayerSpec::Softmax,
            ],
            classes: 10,
        }
    }

    /// Four CT layers for 32x32 RGB images, all patches l=7, K=M=8.
    pub fn four_layer_cifar10() -> Self {
        NetworkSpec {
            input: (32, 32, 3),
            layers: vec![
                LayerSpec::ct(7, 8, 8, 32),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(7, 8, 8, 32),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(7, 8, 8, 64),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(7, 8, 8, 10),
                LayerSpec::avg_pool(2),
                LayerSpec::Softmax,
            ],
            classes: 10,
        }
    }

    /// Six CT layers for 32x32 RGB images, shrinking patches 7/5/3.
    pub fn six_layer_cifar10() -> Self {
        NetworkSpec {
            input: (32, 32, 3),
            layers: vec![
                LayerSpec::ct(7, 8, 8, 32),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(5, 8, 8, 32),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(5, 8, 8, 64),
                LayerSpec::avg_pool(3),
                LayerSpec::ct(5, 8, 8, 128),
                LayerSpec::avg_pool(2),
                LayerSpec::ct(3, 8, 8, 64),
                LayerSpec::avg_pool(2),
                LayerSpec::ct(3, 8, 8, 10),
                LayerSpec::avg_pool(2),
                LayerSpec::Softmax,
            ],
            classes: 10,
        }
    }

    /// Parses the plain-text architecture format:
    ///
    /// ```text
    /// input = 28 28 1
    /// classes = 10
    ///
    /// [layer]
    /// kind = ct
    /// l = 9
    /// k = 10
    /// m = 10
    /// d_out = 100
    /// stride = 1
    /// pad = valid
    ///
    /// [layer]
    /// kind = avg_pool
    /// l = 7
    /// ```
    ///
    /// `#` starts a comment. Keys are case-insensitive. Errors carry the
    /// offending line number.
    pub fn parse_config(text: &str) -> Result<Self> {
        #[derive(Default)]
        struct Section {
            start_line: usize,
            keys: Vec<(String, String, usize)>,
        }
        let mut input: Option<(usize, usize, usize)> = None;
        let mut classes: Option<usize> = None;
        let mut sections: Vec<Section> = Vec::new();

        let parse_usize = |value: &str, line: usize| -> Result<usize> {
            value.trim().parse::<usize>().map_err(|_| CtError::ConfigParse {
                line,
                reason: format!("expected a nonnegative integer, got '{}'", value.trim()),
            })
        };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[layer]" {
                sections.push(Section { start_line: line_no, keys: Vec::new() });
                continue;
            }
            if line.starts_with('[') {
                return Err(CtError::ConfigParse { line: line_no, reason: format!("unknown section '{line}'") });
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CtError::ConfigParse { line: line_no, reason: format!("expected 'key = value', got '{line}'") });
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            if let Some(section) = sections.last_mut() {
                section.keys.push((key, value, line_no));
            } else {
                match key.as_str() {
                    "input" => {
                        let parts: Vec<&str> = value.split_whitespace().collect();
                        if parts.len() != 3 {
                            return Err(CtError::ConfigParse {
                                line: line_no,
                                reason: "input takes three extents: height width depth".into(),
                            });
                        }
                        input = Some((
                            parse_usize(parts[0], line_no)?,
                            parse_usize(parts[1], line_no)?,
                            parse_usize(parts[2], line_no)?,
                        ));
                    }
                    "classes" => classes = Some(parse_usize(&value, line_no)?),
                    other => {
                        return Err(CtError::ConfigParse {
                            line: line_no,
                            reason: format!("unknown key '{other}' outside a [layer] section"),
                        })
                    }
                }
            }
        }

        let input = input.ok_or(CtError::ConfigParse { line: 1, reason: "missing 'input = H W D'".into() })?;
        let classes = classes.ok_or(CtError::ConfigParse { line: 1, reason: "missing 'classes = N'".into() })?;

        let mut layers = Vec::with_capacity(sections.len());
        for section in &sections {
            let mut kind = None;
            let mut fields: Vec<(&str, &str, usize)> = Vec::new();
            for (key, value, line) in &section.keys {
                if key == "kind" {
                    kind = Some((value.to_ascii_lowercase(), *line));
                } else {
                    fields.push((key.as_str(), value.as_str(), *line));
                }
            }
            let Some((kind, kind_line)) = kind else {
                return Err(CtError::ConfigParse { line: section.start_line, reason: "layer section missing 'kind'".into() });
            };
            let lookup = |name: &str| fields.iter().find(|(k, _, _)| *k == name).copied();
            let require = |name: &str| -> Result<(usize, usize)> {
                let Some((_, v, line)) = lookup(name) else {
                    return Err(CtError::ConfigParse {
                        line: section.start_line,
                        reason: format!("{kind} layer missing '{name}'"),
                    });
                };
                Ok((parse_usize(v, line)?, line))
            };
            let known: &[&str] = match kind.as_str() {
                "ct" => &["l", "k", "m", "d_out", "stride", "pad", "fill"],
                "avg_pool" => &["l", "stride"],
                "softmax" => &[],
                other => {
                    return Err(CtError::ConfigParse {
                        line: kind_line,
                        reason: format!("unknown layer kind '{other}' (expected ct, avg_pool, or softmax)"),
                    })
                }
            };
            for (k, _, line) in &fields {
                if !known.contains(k) {
                    return Err(CtError::ConfigParse { line: *line, reason: format!("unknown key '{k}' for kind {kind}") });
                }
            }
            let layer = match kind.as_str() {
                "ct" => {
                    let (l, _) = require("l")?;
                    let (k, _) = require("k")?;
                    let (m, _) = require("m")?;
                    let (d_out, _) = require("d_out")?;
                    let stride = match lookup("stride") {
                        Some((_, v, line)) => parse_usize(v, line)?,
                        None => 1,
                    };
                    let fill = match lookup("fill") {
                        Some((_, v, line)) => v.parse::<f64>().map_err(|_| CtError::ConfigParse {
                            line,
                            reason: format!("expected a number, got '{v}'"),
                        })?,
                        None => 0.0,
                    };
                    let pad = match lookup("pad") {
                        Some((_, "valid", _)) | None => PadSpec::valid(),
                        Some((_, "same", _)) => PadSpec { mode: PadMode::Same, fill },
                        Some((_, other, line)) => {
                            return Err(CtError::ConfigParse {
                                line,
                                reason: format!("pad must be 'valid' or 'same', got '{other}'"),
                            })
                        }
                    };
                    LayerSpec::Ct { l, k, m, d_out, stride, pad }
                }
                "avg_pool" => {
                    let (l, _) = require("l")?;
                    let stride = match lookup("stride") {
                        Some((_, v, line)) => parse_usize(v, line)?,
                        None => 1,
                    };
                    LayerSpec::AvgPool { l, stride }
                }
                _ => LayerSpec::Softmax,
            };
            layers.push(layer);
        }
        Ok(NetworkSpec { input, layers, classes })
    }
}

/// A built layer: specs with materialized parameters for CT layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Ct(CtLayerConfig),
    AvgPool { l: usize, stride: usize },
    Softmax,
}

/// How to run the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Hard,
    Soft(SoftConfig),
}

/// A materialized CT network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Materializes every convolutional table with seeded Gaussian
    /// parameters. Bit channels are assigned round-robin over a seeded
    /// shuffle of the input channels, so the reuse factor stays near
    /// `MK / D_i`. Deterministic given `(spec, seed)`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_shape = spec.input;
        for (index, (layer_spec, out_shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let layer = match *layer_spec {
                LayerSpec::Ct { l, k, m, d_out, stride, pad } => {
                    let d_in = in_shape.2;
                    let mut channel_order: Vec<usize> = (0..d_in).collect();
                    channel_order.shuffle(&mut rng);
                    let mut next_channel = 0usize;
                    let tables = (0..m)
                        .map(|_| {
                            let calc = WordCalculator::random(k, l, &channel_order, &mut next_channel, &mut rng)?;
                            let table = VotingTable::random(k, d_out, &mut rng);
                            ConvTable::new(calc, table)
                        })
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| CtError::BuildError { index, reason: e.to_string() })?;
                    Layer::Ct(CtLayerConfig::new(tables, stride, pad, d_out)?)
                }
                LayerSpec::AvgPool { l, stride } => Layer::AvgPool { l, stride },
                LayerSpec::Softmax => Layer::Softmax,
            };
            layers.push(layer);
            in_shape = *out_shape;
        }
        Ok(Network { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Indices of the CT layers within the layer chain.
    pub fn ct_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Ct(_)).then_some(i))
            .collect()
    }

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        if image.shape() != self.spec.input {
            return Err(CtError::ShapeMismatch {
                expected: format!("{:?}", self.spec.input),
                got: format!("{:?}", image.shape()),
            });
        }
        Ok(())
    }

    /// Runs the layer chain and returns raw logits (the final tensor
    /// flattened; softmax is applied only at loss/evaluation sites).
    pub fn forward(&self, image: &Tensor3, mode: ForwardMode) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut current = image.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::Ct(ct) => match mode {
                    ForwardMode::Hard => forward_hard(&current, ct)?,
                    ForwardMode::Soft(cfg) => forward_soft(&current, ct, &cfg)?.0,
                },
                Layer::AvgPool { l, stride } => avg_pool(&current, *l, *stride)?,
                Layer::Softmax => current,
            };
        }
        Ok(current.data().to_vec())
    }

    /// Hard-mode forward on the single-threaded layer path (used by the
    /// timing harness).
    pub fn forward_hard_serial(&self, image: &Tensor3) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut current = image.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::Ct(ct) => forward_hard_serial(&current, ct)?,
                Layer::AvgPool { l, stride } => avg_pool(&current, *l, *stride)?,
                Layer::Softmax => current,
            };
        }
        Ok(current.data().to_vec())
    }

    /// Fraction of examples whose argmax logit misses the label.
    pub fn evaluate(&self, images: &[Tensor3], labels: &[usize], mode: ForwardMode) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(CtError::EmptyDataset);
        }
        #[cfg(feature = "parallel")]
        let errors: Result<usize> = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &label)| Ok((argmax(&self.forward(img, mode)?) != label) as usize))
            .try_reduce(|| 0, |a, b| Ok(a + b));
        #[cfg(not(feature = "parallel"))]
        let errors: Result<usize> = images
            .iter()
            .zip(labels.iter())
            .map(|(img, &label)| Ok((argmax(&self.forward(img, mode)?) != label) as usize))
            .try_fold(0usize, |a, r: Result<usize>| Ok(a + r?));
        Ok(errors? as f64 / images.len() as f64)
    }

    /// Total CT output locations in one forward pass.
    pub fn ct_output_locations(&self) -> u64 {
        let shapes = self.spec.shapes().expect("built network has valid shapes");
        self.spec
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::Ct { .. }))
            .map(|(_, s)| (s.0 * s.1) as u64)
            .sum()
    }

    /// Learnable scalar count: table entries plus five per bit function.
    pub fn param_count(&self) -> u64 {
        self.layer_dims().iter().map(|d| d.table_entries() + d.bit_params).sum()
    }

    fn layer_dims(&self) -> Vec<LayerDims> {
        self.layers
            .iter()
            .filter_map(|layer| match layer {
                Layer::Ct(ct) => Some(LayerDims {
                    m: ct.m() as u64,
                    k: ct.k() as u32,
                    d_out: ct.d_out() as u64,
                    bit_params: (ct.m() * ct.k() * 5) as u64,
                }),
                _ => None,
            })
            .collect()
    }

    /// Op counts against the same-geometry convolutional stack, plus the
    /// parameter and byte footprint.
    pub fn cost(&self, c_b: u64) -> CostReport {
        let shapes = self.spec.shapes().expect("built network has valid shapes");
        let mut in_shape = self.spec.input;
        let mut ops_cnn = 0u64;
        let mut ops_ct = 0u64;
        for (layer_spec, out_shape) in self.spec.layers.iter().zip(&shapes) {
            if let LayerSpec::Ct { l, k, m, d_out, .. } = *layer_spec {
                let locations = (out_shape.0 * out_shape.1) as u64;
                ops_cnn += locations * cost_cnn(l as u64, in_shape.2 as u64, d_out as u64);
                ops_ct += locations * m as u64 * (c_b * k as u64 + d_out as u64);
            }
            in_shape = *out_shape;
        }
        let dims = self.layer_dims();
        CostReport {
            ops_cnn,
            ops_ct,
            ratio: if ops_cnn > 0 && ops_ct > 0 { ops_cnn as f64 / ops_ct as f64 } else { 0.0 },
            params: self.param_count(),
            bytes_f32: memory_model(&dims, Precision::F32),
            bytes_i8: memory_model(&dims, Precision::I8),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
