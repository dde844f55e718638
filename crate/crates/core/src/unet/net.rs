//! Classic encoder/decoder U-Net with skip connections.
//!
//! For `L` levels with widths `w_0..w_{L-1}`:
//!
//! | block       | layers                                                       |
//! |-------------|--------------------------------------------------------------|
//! | `enc{l}`    | conv3 (in -> w_l) + ReLU, conv3 (w_l -> w_l) + ReLU          |
//! | between     | maxpool2 after every encoder level except the last           |
//! | `dec{l}`    | upsample2, conv3 `up` (w_{l+1} -> w_l), concat [skip, up],   |
//! |             | conv3 (2 w_l -> w_l) + ReLU, conv3 (w_l -> w_l) + ReLU       |
//! | `head`      | conv1 (w_0 -> 1), no activation                              |
//!
//! The deepest encoder level is the bottleneck. The `up` convolution is
//! linear. The output is a single channel of logits.

use super::ops::{concat_channels, conv3d, maxpool2, relu_in_place, upsample2_nearest, Conv3d};
use super::weights::ModelWeights;
use super::{Backend, Tensor5, UNetError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl UNetArch {
    /// Widths double per level starting from `base_width`.
    pub fn classic(levels: usize, base_width: usize, in_channels: usize) -> Self {
        Self { in_channels, widths: (0..levels).map(|l| base_width << l).collect() }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dimensions must be divisible by this (one halving per pooling).
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    /// Every tensor name and shape in canonical file order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![o, i, k, k, k]));
            specs.push((format!("{name}.bias"), vec![o]));
        };
        let w = &self.widths;
        for l in 0..w.len() {
            let input = if l == 0 { self.in_channels } else { w[l - 1] };
            conv(format!("enc{l}.conv1"), w[l], input, 3);
            conv(format!("enc{l}.conv2"), w[l], w[l], 3);
        }
        for l in 0..w.len().saturating_sub(1) {
            conv(format!("dec{l}.up"), w[l], w[l + 1], 3);
            conv(format!("dec{l}.conv1"), w[l], 2 * w[l], 3);
            conv(format!("dec{l}.conv2"), w[l], w[l], 3);
        }
        conv("head".to_owned(), 1, w[0], 1);
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs().iter().map(|(_, d)| d.iter().product::<usize>()).sum()
    }

    /// Recovers the architecture from tensor names and shapes, then checks
    /// the set is complete and exact.
    pub fn infer_from(weights: &ModelWeights) -> Result<Self, UNetError> {
        let first = weights
            .get("enc0.conv1.weight")
            .ok_or_else(|| UNetError::IncompleteWeights("missing enc0.conv1.weight".into()))?;
        if first.dims.len() != 5 || first.dims[0] == 0 || first.dims[1] == 0 {
            return Err(UNetError::ShapeMismatch(format!("enc0.conv1.weight has dims {:?}", first.dims)));
        }
        let in_channels = first.dims[1];
        let mut widths = Vec::new();
        while let Some(t) = weights.get(&format!("enc{}.conv1.weight", widths.len())) {
            match t.dims.first() {
                Some(&w) if w > 0 => widths.push(w),
                _ => return Err(UNetError::ShapeMismatch(format!("{} has dims {:?}", t.name, t.dims))),
            }
        }
        let arch = Self { in_channels, widths };
        let specs = arch.tensor_specs();
        for (name, dims) in &specs {
            let t = weights.get(name).ok_or_else(|| UNetError::IncompleteWeights(format!("missing {name}")))?;
            if &t.dims != dims || t.data.len() != t.element_count() {
                return Err(UNetError::ShapeMismatch(format!("{name}: expected {dims:?}, found {:?}", t.dims)));
            }
        }
        if weights.tensors().len() != specs.len() {
            let extra: Vec<&str> = weights
                .tensors()
                .iter()
                .map(|t| t.name.as_str())
                .filter(|n| !specs.iter().any(|(s, _)| s == n))
                .collect();
            return Err(UNetError::IncompleteWeights(format!("unexpected or duplicate tensors: {extra:?}")));
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: Conv3d,
    conv1: Conv3d,
    conv2: Conv3d,
}

/// A validated, ready-to-run network.
#[derive(Debug, Clone)]
pub struct UNet {
    arch: UNetArch,
    encoder: Vec<[Conv3d; 2]>,
    decoder: Vec<DecoderBlock>,
    head: Conv3d,
}

fn take_conv(weights: &ModelWeights, name: &str) -> Result<Conv3d, UNetError> {
    let missing = |n: &str| UNetError::IncompleteWeights(format!("missing {n}"));
    let w = weights.get(&format!("{name}.weight")).ok_or_else(|| missing(name))?;
    let b = weights.get(&format!("{name}.bias")).ok_or_else(|| missing(name))?;
    Conv3d::new(w.dims[0], w.dims[1], w.dims[2], w.data.clone(), b.data.clone())
}

impl UNet {
    pub fn from_weights(weights: &ModelWeights) -> Result<Self, UNetError> {
        let arch = UNetArch::infer_from(weights)?;
        let levels = arch.levels();
        let encoder = (0..levels)
            .map(|l| Ok([take_conv(weights, &format!("enc{l}.conv1"))?, take_conv(weights, &format!("enc{l}.conv2"))?]))
            .collect::<Result<Vec<_>, UNetError>>()?;
        let decoder = (0..levels - 1)
            .map(|l| {
                Ok(DecoderBlock {
                    up: take_conv(weights, &format!("dec{l}.up"))?,
                    conv1: take_conv(weights, &format!("dec{l}.conv1"))?,
                    conv2: take_conv(weights, &format!("dec{l}.conv2"))?,
                })
            })
            .collect::<Result<Vec<_>, UNetError>>()?;
        let head = take_conv(weights, "head")?;
        Ok(Self { arch, encoder, decoder, head })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn forward(&self, patch: &Tensor5) -> Result<Tensor5, UNetError> {
        if patch.channels() != self.arch.in_channels {
            return Err(UNetError::ShapeMismatch(format!(
                "network takes {} channels, patch has {}",
                self.arch.in_channels,
                patch.channels()
            )));
        }
        let m = self.arch.spatial_multiple();
        if patch.shape().iter().any(|n| n % m != 0) {
            return Err(UNetError::NotDivisible { shape: patch.shape(), multiple: m });
        }

        let conv_relu = |x: &Tensor5, c: &Conv3d| -> Result<Tensor5, UNetError> {
            let mut y = conv3d(x, c)?;
            relu_in_place(&mut y);
            Ok(y)
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = patch.clone();
        for (l, [c1, c2]) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = maxpool2(&x)?;
            }
            x = conv_relu(&conv_relu(&x, c1)?, c2)?;
            skips.push(x.clone());
        }
        skips.pop();
        for (block, skip) in self.decoder.iter().zip(skips.iter()).rev() {
            let up = conv3d(&upsample2_nearest(&x), &block.up)?;
            let merged = concat_channels(&[skip, &up])?;
            x = conv_relu(&conv_relu(&merged, &block.conv1)?, &block.conv2)?;
        }
        conv3d(&x, &self.head)
    }
}

impl Backend for UNet {
    fn infer(&self, patch: &Tensor5) -> Result<Tensor5, UNetError> {
        self.forward(patch)
    }

    fn spatial_multiple(&self) -> usize {
        self.arch.spatial_multiple()
    }

    fn name(&self) -> &str {
        "unet"
    }
}

/// One-shot forward pass; validates `weights` on every call.
pub fn unet_forward(weights: &ModelWeights, patch: &Tensor5) -> Result<Tensor5, UNetError> {
    UNet::from_weights(weights)?.forward(patch)
}
