//! Convolutional feature extractor: a chain of conv / ReLU / 2×2 max-pool
//! layers whose last output is the feature-map stack handed to pooling.
//!
//! Every conv layer carries an explicit binary mask. Masked weights are
//! always exactly zero; all mutators in this module maintain that.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::tensor::{self, Backprop, GradientTape, TapeOp, Tensor};

pub const MODEL_KIND: &str = "convprune-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    #[serde(alias = "pool", alias = "maxpool2")]
    Maxpool,
}

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels (conv only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// Expected input channels (conv only); checked against the chain when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            channels: Some(channels),
            in_channels: None,
            kernel: Some(kernel),
            stride: None,
            padding: None,
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            channels: None,
            in_channels: None,
            kernel: None,
            stride: None,
            padding: None,
        }
    }

    pub fn maxpool() -> Self {
        Self {
            kind: LayerKind::Maxpool,
            ..Self::relu()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ArchitectureFile {
    Full(ArchitectureSpec),
    Layers(Vec<LayerSpec>),
}

impl ArchitectureSpec {
    /// The 3×32×32 → 64×4×4 reference network: three VGG-style blocks.
    pub fn tinynet() -> Self {
        let c = LayerSpec::conv;
        let r = LayerSpec::relu;
        let p = LayerSpec::maxpool;
        Self {
            input: [3, 32, 32],
            layers: vec![
                c(16, 3),
                r(),
                c(16, 3),
                r(),
                p(),
                c(32, 3),
                r(),
                c(32, 3),
                r(),
                p(),
                c(64, 3),
                r(),
                p(),
            ],
        }
    }

    /// Parses either `{"input": [C,H,W], "layers": [...]}` or a bare layer
    /// list, which is taken to have the tinynet input shape.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str(text)? {
            ArchitectureFile::Full(spec) => spec,
            ArchitectureFile::Layers(layers) => Self {
                input: Self::tinynet().input,
                layers,
            },
        })
    }

    /// Walks the shape chain, returning every layer's output shape.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Architecture {
                layer: 0,
                reason: format!("input shape {:?} has a zero dimension", self.input),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Architecture {
                layer: 0,
                reason: "architecture has no layers".into(),
            });
        }
        let mut shape = self.input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::Architecture { layer: i, reason };
            shape = match spec.kind {
                LayerKind::Conv => {
                    let out = spec.channels.filter(|&c| c > 0).ok_or_else(|| bad("conv layer needs channels >= 1".into()))?;
                    if let Some(expected) = spec.in_channels {
                        if expected != shape[0] {
                            return Err(bad(format!(
                                "declares {expected} input channels but receives {}",
                                shape[0]
                            )));
                        }
                    }
                    let k = spec.kernel.filter(|&k| k > 0).ok_or_else(|| bad("conv layer needs kernel >= 1".into()))?;
                    let stride = spec.stride.unwrap_or(1);
                    let padding = spec.padding.unwrap_or(k / 2);
                    let h = tensor::conv_output_len(shape[1], k, stride, padding).map_err(|e| bad(e.to_string()))?;
                    let w = tensor::conv_output_len(shape[2], k, stride, padding).map_err(|e| bad(e.to_string()))?;
                    [out, h, w]
                }
                LayerKind::Relu => shape,
                LayerKind::Maxpool => {
                    if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(bad(format!(
                            "2x2 max pooling needs even spatial dims, got {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    [shape[0], shape[1] / 2, shape[2] / 2]
                }
            };
            shapes.push(shape);
        }
        let last = self.layers.len() - 1;
        if self.layers[last].kind == LayerKind::Relu {
            return Err(Error::Architecture {
                layer: last,
                reason: "final layer must be a conv or pooling layer".into(),
            });
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMetadata {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    name: String,
    weights: Tensor,
    bias: Tensor,
    mask: Vec<bool>,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight_count(&self) -> usize {
        self.mask.len()
    }

    pub fn unmasked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(output channels, input channels, kernel h, kernel w)`.
    pub fn kernel_dims(&self) -> (usize, usize, usize, usize) {
        self.weights.dims4().expect("conv weights are rank 4")
    }

    /// Replaces the weights; fails if a masked position would be nonzero.
    pub fn set_weights(&mut self, weights: Tensor) -> Result<()> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::Shape(format!(
                "{}: new weights {:?} do not match {:?}",
                self.name,
                weights.shape(),
                self.weights.shape()
            )));
        }
        let violations = masked_nonzero(&weights, &self.mask);
        if violations > 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: {violations} nonzero weights fall under the mask",
                self.name
            )));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Tensor) -> Result<()> {
        if bias.shape() != self.bias.shape() {
            return Err(Error::Shape(format!(
                "{}: new bias {:?} does not match {:?}",
                self.name,
                bias.shape(),
                self.bias.shape()
            )));
        }
        self.bias = bias;
        Ok(())
    }

    /// Replaces the mask and zeroes every newly masked weight.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.mask.len() {
            return Err(Error::Shape(format!(
                "{}: mask has {} entries, layer has {} weights",
                self.name,
                mask.len(),
                self.mask.len()
            )));
        }
        self.mask = mask;
        self.project();
        Ok(())
    }

    /// Masks a single weight (flat index into the weight tensor).
    pub fn prune_weight(&mut self, flat: usize) {
        self.mask[flat] = false;
        self.weights.data_mut()[flat] = 0.0;
    }

    /// Forces every masked weight to exactly zero.
    pub fn project(&mut self) {
        for (w, &keep) in self.weights.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *w = 0.0;
            }
        }
    }

    /// `w -= lr * dw`, `b -= lr * db`, then re-applies the mask.
    pub fn sgd_step(&mut self, weight_grad: &Tensor, bias_grad: &Tensor, lr: f64) {
        for (w, g) in self.weights.data_mut().iter_mut().zip(weight_grad.data()) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.data_mut().iter_mut().zip(bias_grad.data()) {
            *b -= lr * g;
        }
        self.project();
    }
}

fn masked_nonzero(weights: &Tensor, mask: &[bool]) -> usize {
    weights
        .data()
        .iter()
        .zip(mask)
        .filter(|(&w, &keep)| !keep && w != 0.0)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    architecture: ArchitectureSpec,
    layers: Vec<Layer>,
    output_shape: [usize; 3],
    pub metadata: ModelMetadata,
}

/// Builds a model with He-normal weights (`std = sqrt(2 / fan_in)`), zero
/// biases and all-ones masks.
pub fn init_network(architecture: &ArchitectureSpec, seed: u64) -> Result<NetworkModel> {
    let shapes = architecture.output_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_shape = architecture.input;
    let mut layers = Vec::with_capacity(architecture.layers.len());
    let mut conv_no = 0;
    for (spec, out_shape) in architecture.layers.iter().zip(&shapes) {
        layers.push(match spec.kind {
            LayerKind::Conv => {
                conv_no += 1;
                let k = spec.kernel.unwrap();
                let (c_out, c_in) = (out_shape[0], in_shape[0]);
                let fan_in = c_in * k * k;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let weights = Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(&mut rng));
                Layer::Conv(ConvLayer {
                    name: format!("conv{conv_no}"),
                    mask: vec![true; weights.len()],
                    weights,
                    bias: Tensor::zeros(&[c_out]),
                    stride: spec.stride.unwrap_or(1),
                    padding: spec.padding.unwrap_or(k / 2),
                })
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Maxpool => Layer::MaxPool2,
        });
        in_shape = *out_shape;
    }
    Ok(NetworkModel {
        architecture: architecture.clone(),
        layers,
        output_shape: *shapes.last().unwrap(),
        metadata: ModelMetadata {
            name: "model".into(),
            seed,
            history: vec![format!("init seed={seed}")],
        },
    })
}

impl NetworkModel {
    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.architecture
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.architecture.input
    }

    /// Shape `[C, H, W]` of the extracted feature maps.
    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `(layer index, conv layer)` pairs in network order.
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut ConvLayer)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvLayer> {
        match self.layers.get(layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, layer: usize) -> Option<&mut ConvLayer> {
        match self.layers.get_mut(layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_weight_count(&self) -> usize {
        self.conv_layers().map(|(_, c)| c.weight_count()).sum()
    }

    pub fn unmasked_weight_count(&self) -> usize {
        self.conv_layers().map(|(_, c)| c.unmasked_count()).sum()
    }

    /// Checks that every masked weight is exactly zero.
    pub fn validate_masks(&self) -> Result<()> {
        for (i, conv) in self.conv_layers() {
            let count = masked_nonzero(&conv.weights, &conv.mask);
            if count > 0 {
                return Err(Error::MaskViolation { layer: i, count });
            }
        }
        Ok(())
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.architecture.input {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.architecture.input
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        image: &Tensor,
        mut tape: Option<&mut GradientTape>,
        mut conv_inputs: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        self.check_input(image)?;
        let mut x = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv(c) => {
                    let y = tensor::conv2d_forward(&x, &c.weights, &c.bias, c.stride, c.padding)?;
                    if let Some(inputs) = conv_inputs.as_deref_mut() {
                        inputs.push(x.clone());
                    }
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeOp::Conv2d {
                            layer: i,
                            input: x,
                            stride: c.stride,
                            padding: c.padding,
                        });
                    }
                    y
                }
                Layer::Relu => {
                    let y = tensor::relu_forward(&x);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeOp::Relu { input: x });
                    }
                    y
                }
                Layer::MaxPool2 => {
                    let (y, argmax) = tensor::maxpool2_forward(&x)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeOp::MaxPool2 {
                            input_shape: x.shape().to_vec(),
                            argmax,
                        });
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    /// Feature maps after the last layer.
    pub fn forward_features(&self, image: &Tensor) -> Result<Tensor> {
        self.run(image, None, None)
    }

    /// Forward pass that records a tape for [`NetworkModel::backward`].
    pub fn forward_recorded(&self, image: &Tensor) -> Result<(Tensor, GradientTape)> {
        let mut tape = GradientTape::new();
        let out = self.run(image, Some(&mut tape), None)?;
        Ok((out, tape))
    }

    /// The input tensor of every conv layer, in network order.
    pub fn conv_inputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut inputs = Vec::new();
        self.run(image, None, Some(&mut inputs))?;
        Ok(inputs)
    }

    pub fn backward(&self, tape: &GradientTape, upstream: Tensor) -> Result<Backprop> {
        tape.backward(upstream, |i| self.conv(i).map(|c| &c.weights))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "architecture": self.architecture,
            "metadata": self.metadata,
        });
        let mut writer = ContainerWriter::new(MODEL_KIND, header);
        for (_, conv) in self.conv_layers() {
            writer.add_f32(&format!("{}.weight", conv.name), &conv.weights);
            writer.add_f32(&format!("{}.bias", conv.name), &conv.bias);
            writer.add_bits(&format!("{}.mask", conv.name), conv.weights.shape(), &conv.mask);
        }
        writer.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = Container::from_bytes(bytes)?;
        if container.kind() != MODEL_KIND {
            return Err(Error::Integrity(format!(
                "expected a '{MODEL_KIND}' file, found '{}'",
                container.kind()
            )));
        }
        let header = container.header();
        let architecture: ArchitectureSpec = serde_json::from_value(header["architecture"].clone())
            .map_err(|e| Error::Integrity(format!("bad architecture in manifest: {e}")))?;
        let metadata: ModelMetadata = serde_json::from_value(header["metadata"].clone())
            .map_err(|e| Error::Integrity(format!("bad metadata in manifest: {e}")))?;
        let mut model = init_network(&architecture, 0)?;
        model.metadata = metadata;
        for (i, conv) in model.conv_layers_mut() {
            let weights = container.f32_tensor(&format!("{}.weight", conv.name))?;
            let bias = container.f32_tensor(&format!("{}.bias", conv.name))?;
            let (mask_shape, mask) = container.bits(&format!("{}.mask", conv.name))?;
            if weights.shape() != conv.weights.shape()
                || bias.shape() != conv.bias.shape()
                || mask_shape != conv.weights.shape()
            {
                return Err(Error::Integrity(format!(
                    "{}: stored tensor shapes do not match the architecture",
                    conv.name
                )));
            }
            let count = masked_nonzero(&weights, &mask);
            if count > 0 {
                return Err(Error::MaskViolation { layer: i, count });
            }
            conv.weights = weights;
            conv.bias = bias;
            conv.mask = mask;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rounds every parameter to `f32` precision, as stored on disk.
    pub fn quantize_to_storage(&mut self) {
        for (_, conv) in self.conv_layers_mut() {
            for v in conv.weights.data_mut().iter_mut().chain(conv.bias.data_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    NetworkModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{ContainerWriter, MAGIC};

    #[test]
    fn tinynet_shapes() {
        let arch = ArchitectureSpec::tinynet();
        let shapes = arch.output_shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), [64, 4, 4]);
        let m = init_network(&arch, 1).unwrap();
        assert_eq!(m.conv_layers().count(), 5);
        assert_eq!(m.conv_weight_count(), 432 + 2304 + 4608 + 9216 + 18432);
        assert_eq!(m.unmasked_weight_count(), m.conv_weight_count());
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ArchitectureSpec::tinynet();
        let a = init_network(&arch, 42).unwrap();
        let b = init_network(&arch, 42).unwrap();
        let c = init_network(&arch, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mismatched_channels_name_the_layer() {
        let mut arch = ArchitectureSpec::tinynet();
        arch.layers[2].in_channels = Some(8);
        match arch.output_shapes() {
            Err(Error::Architecture { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected architecture error, got {other:?}"),
        }
        assert!(init_network(&arch, 0).is_err());
    }

    #[test]
    fn odd_pool_and_trailing_relu_rejected() {
        let arch = ArchitectureSpec {
            input: [1, 3, 3],
            layers: vec![LayerSpec::maxpool()],
        };
        assert!(matches!(arch.output_shapes(), Err(Error::Architecture { layer: 0, .. })));
        let arch = ArchitectureSpec {
            input: [1, 4, 4],
            layers: vec![LayerSpec::conv(2, 3), LayerSpec::relu()],
        };
        assert!(matches!(arch.output_shapes(), Err(Error::Architecture { layer: 1, .. })));
    }

    #[test]
    fn he_init_std() {
        // fan_in = 8 via 8 input channels and a 1x1 kernel; 16k weights.
        let arch = ArchitectureSpec {
            input: [8, 2, 2],
            layers: vec![LayerSpec::conv(2048, 1)],
        };
        let m = init_network(&arch, 5).unwrap();
        let w = m.conv(0).unwrap().weights().data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (2.0f64 / 8.0).sqrt();
        assert!((std - expected).abs() / expected < 0.2, "std {std}");
    }

    #[test]
    fn architecture_json_forms() {
        let full = serde_json::to_string(&ArchitectureSpec::tinynet()).unwrap();
        assert_eq!(ArchitectureSpec::from_json(&full).unwrap(), ArchitectureSpec::tinynet());
        let bare = r#"[{"kind":"conv","channels":4,"kernel":3},{"kind":"relu"},{"kind":"maxpool"}]"#;
        let spec = ArchitectureSpec::from_json(bare).unwrap();
        assert_eq!(spec.input, [3, 32, 32]);
        assert_eq!(spec.output_shapes().unwrap().last(), Some(&[4, 16, 16]));
    }

    #[test]
    fn zero_inputs_give_zero_features() {
        let m = init_network(&ArchitectureSpec::tinynet(), 3).unwrap();
        let f = m.forward_features(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(f.shape(), &[64, 4, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(m.forward_features(&Tensor::zeros(&[3, 16, 16])).is_err());
    }

    #[test]
    fn fully_masked_model_gives_zero_features() {
        let mut m = init_network(&ArchitectureSpec::tinynet(), 3).unwrap();
        for (_, c) in m.conv_layers_mut() {
            let n = c.weight_count();
            c.set_mask(vec![false; n]).unwrap();
        }
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.37).sin());
        let f = m.forward_features(&img).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        m.validate_masks().unwrap();
    }

    #[test]
    fn mask_mutators_keep_invariant() {
        let mut m = init_network(&ArchitectureSpec::tinynet(), 9).unwrap();
        let c = m.conv_mut(0).unwrap();
        c.prune_weight(5);
        assert_eq!(c.weights().data()[5], 0.0);
        let mut w = c.weights().clone();
        w.data_mut()[5] = 1.0;
        assert!(c.set_weights(w).is_err());
        let g = Tensor::full(c.weights().shape(), 1.0);
        let b = Tensor::zeros(c.bias().shape());
        c.sgd_step(&g, &b, 0.1);
        assert_eq!(c.weights().data()[5], 0.0);
        m.validate_masks().unwrap();
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = init_network(&ArchitectureSpec::tinynet(), 11).unwrap();
        m.conv_mut(2).unwrap().prune_weight(17);
        m.metadata.history.push("pruned".into());
        let bytes = m.to_bytes().unwrap();
        let loaded = NetworkModel::from_bytes(&bytes).unwrap();
        let mut expected = m.clone();
        expected.quantize_to_storage();
        assert_eq!(loaded, expected);
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn flipped_magic_is_integrity_error() {
        let m = init_network(&ArchitectureSpec::tinynet(), 11).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        assert_eq!(bytes[..8], MAGIC);
        bytes[3] ^= 0x20;
        assert!(matches!(NetworkModel::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn nonzero_weight_under_mask_rejected_on_load() {
        let m = init_network(&ArchitectureSpec::tinynet(), 11).unwrap();
        let header = serde_json::json!({
            "architecture": m.architecture(),
            "metadata": m.metadata,
        });
        let mut w = ContainerWriter::new(MODEL_KIND, header);
        for (i, conv) in m.conv_layers() {
            let mut mask = conv.mask().to_vec();
            if i == 0 {
                mask[0] = false;
            }
            w.add_f32(&format!("{}.weight", conv.name()), conv.weights());
            w.add_f32(&format!("{}.bias", conv.name()), conv.bias());
            w.add_bits(&format!("{}.mask", conv.name()), conv.weights().shape(), &mask);
        }
        let bytes = w.to_bytes().unwrap();
        assert!(matches!(
            NetworkModel::from_bytes(&bytes),
            Err(Error::MaskViolation { layer: 0, count: 1 })
        ));
    }
}
