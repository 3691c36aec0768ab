//! Fixed-weight convolutional feature extractor.
//!
//! Eight blocks of 3x3 convolution (padding 1) + bias + ReLU with channel plan
//! 3→8→8→16→16→32→32→64→64 and 2x2 max pooling after blocks 2, 4 and 6.
//! Tapped features are the post-ReLU block outputs, before any pooling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::ImageBuffer;
use crate::error::{dim_err, Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 8;
/// Input channels of block 1 followed by the output channels of blocks 1..=8.
pub const CHANNEL_PLAN: [usize; NUM_BLOCKS + 1] = [3, 8, 8, 16, 16, 32, 32, 64, 64];
pub const KERNEL_SIZE: usize = 3;
const PADDING: usize = 1;

const WEIGHTS_MAGIC: &[u8; 4] = b"TSTW";
const WEIGHTS_VERSION: u32 = 1;

/// Whether a 2x2 max pool follows block `layer` (1-based).
pub fn pools_after(layer: usize) -> bool {
    matches!(layer, 2 | 4 | 6)
}

/// Spatial size of block `layer`'s output for an `h x w` input.
pub fn layer_spatial(layer: usize, h: usize, w: usize) -> (usize, usize) {
    let pools = (1..layer).filter(|&l| pools_after(l)).count();
    (h >> pools, w >> pools)
}

fn check_layer(layer: usize) -> Result<()> {
    if !(1..=NUM_BLOCKS).contains(&layer) {
        return Err(Error::Validation(format!(
            "layer index {layer} outside 1..={NUM_BLOCKS}"
        )));
    }
    Ok(())
}

/// Activations of one block, flattened to `[N_l, M_l]` (channels x positions).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    fn from_chw(layer: usize, t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Ok(Self {
            layer,
            height: h,
            width: w,
            data: t.clone().reshape(&[c, h * w])?,
        })
    }

    /// Number of filters `N_l`.
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Flattened spatial size `M_l`.
    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    image_shape: Vec<usize>,
    /// Input to each block (after the previous block's pooling, if any).
    pub inputs: Vec<Tensor<T>>,
    /// Pre-activation (conv + bias) of each block.
    pub preactivations: Vec<Tensor<T>>,
    /// Post-ReLU output of each block.
    pub outputs: Vec<Tensor<T>>,
    /// Pool mask for blocks followed by pooling.
    pub pool_masks: Vec<Option<ops::PoolMask>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn depth(&self) -> usize {
        self.outputs.len()
    }

    pub fn feature(&self, layer: usize) -> Result<FeatureMap<T>> {
        check_layer(layer)?;
        let out = self
            .outputs
            .get(layer - 1)
            .ok_or_else(|| Error::Validation(format!("layer {layer} beyond traced depth")))?;
        FeatureMap::from_chw(layer, out)
    }
}

/// The convolutional stack with immutable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// He-normal kernels drawn from a seeded ChaCha8 stream, zero biases.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..NUM_BLOCKS)
            .map(|b| {
                let (c_in, c_out) = (CHANNEL_PLAN[b], CHANNEL_PLAN[b + 1]);
                let fan_in = (c_in * KERNEL_SIZE * KERNEL_SIZE) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let values = (0..c_out * c_in * KERNEL_SIZE * KERNEL_SIZE)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect();
                ConvBlock {
                    kernel: Tensor::new(vec![c_out, c_in, KERNEL_SIZE, KERNEL_SIZE], values)
                        .expect("plan shape"),
                    bias: Tensor::zeros(&[c_out]),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn from_blocks(blocks: Vec<ConvBlock<T>>) -> Result<Self> {
        if blocks.len() != NUM_BLOCKS {
            return Err(dim_err!("expected {NUM_BLOCKS} blocks, got {}", blocks.len()));
        }
        for (b, block) in blocks.iter().enumerate() {
            let (c_in, c_out) = (CHANNEL_PLAN[b], CHANNEL_PLAN[b + 1]);
            block
                .kernel
                .expect_shape(&[c_out, c_in, KERNEL_SIZE, KERNEL_SIZE])?;
            block.bias.expect_shape(&[c_out])?;
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[ConvBlock<T>] {
        &self.blocks
    }

    /// Runs blocks `1..=depth`.
    pub fn forward(&self, image: &ImageBuffer<T>, depth: usize) -> Result<ForwardTrace<T>> {
        check_layer(depth)?;
        let mut trace = ForwardTrace {
            image_shape: image.tensor().shape().to_vec(),
            inputs: Vec::with_capacity(depth),
            preactivations: Vec::with_capacity(depth),
            outputs: Vec::with_capacity(depth),
            pool_masks: Vec::with_capacity(depth),
        };
        let mut x = image.tensor().clone();
        for (i, block) in self.blocks[..depth].iter().enumerate() {
            let layer = i + 1;
            let z = ops::add_channel_bias(&ops::conv2d_forward(&x, &block.kernel, PADDING)?, &block.bias)?;
            let y = ops::relu_forward(&z);
            let next = if pools_after(layer) && layer < depth {
                let (pooled, mask) = ops::maxpool2_forward(&y)?;
                trace.pool_masks.push(Some(mask));
                Some(pooled)
            } else {
                trace.pool_masks.push(None);
                None
            };
            trace.inputs.push(x);
            trace.preactivations.push(z);
            x = next.unwrap_or_else(|| y.clone());
            trace.outputs.push(y);
        }
        Ok(trace)
    }

    pub fn extract(
        &self,
        image: &ImageBuffer<T>,
        layers: &[usize],
    ) -> Result<BTreeMap<usize, FeatureMap<T>>> {
        if layers.is_empty() {
            return Err(Error::Validation("no layers requested".into()));
        }
        for &l in layers {
            check_layer(l)?;
        }
        let depth = *layers.iter().max().expect("non-empty");
        let trace = self.forward(image, depth)?;
        layers.iter().map(|&l| Ok((l, trace.feature(l)?))).collect()
    }

    /// Global average of each block-8 channel.
    pub fn embed(&self, image: &ImageBuffer<T>) -> Result<Tensor<T>> {
        let f = self.extract(image, &[NUM_BLOCKS])?.remove(&NUM_BLOCKS).expect("layer 8");
        let m = T::from_usize_lossy(f.positions());
        let means = f
            .data
            .data()
            .chunks(f.positions())
            .map(|row| row.iter().copied().sum::<T>() / m)
            .collect();
        Ok(Tensor::from_vec(means))
    }

    /// Gradient of `sum_l sum(grads[l] * F^l)` with respect to the image pixels.
    pub fn backprop_to_image(
        &self,
        image: &ImageBuffer<T>,
        grads: &BTreeMap<usize, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let Some(&depth) = grads.keys().max() else {
            return Ok(Tensor::zeros(image.tensor().shape()));
        };
        for &l in grads.keys() {
            check_layer(l)?;
        }
        let trace = self.forward(image, depth)?;
        self.backward(&trace, grads)
    }

    /// Backward pass through a stored trace. `grads` are keyed by layer and
    /// shaped like the corresponding [`FeatureMap`] (`[N_l, M_l]`).
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grads: &BTreeMap<usize, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let Some(&depth) = grads.keys().max() else {
            return Ok(Tensor::zeros(&trace.image_shape));
        };
        if depth > trace.depth() {
            return Err(Error::Validation(format!(
                "gradient for layer {depth} but trace depth {}",
                trace.depth()
            )));
        }
        let mut pending: Option<Tensor<T>> = None;
        for layer in (1..=depth).rev() {
            let out = &trace.outputs[layer - 1];
            let mut g = pending.take().unwrap_or_else(|| Tensor::zeros(out.shape()));
            if let Some(tapped) = grads.get(&layer) {
                let (c, h, w) = out.dims3()?;
                if tapped.shape() != [c, h * w] {
                    return Err(dim_err!(
                        "layer {layer} gradient shaped {:?}, feature map is [{c}, {}]",
                        tapped.shape(),
                        h * w
                    ));
                }
                g.add_assign(&tapped.clone().reshape(&[c, h, w])?)?;
            }
            let dz = ops::relu_backward(&g, &trace.preactivations[layer - 1])?;
            let input = &trace.inputs[layer - 1];
            let dx = ops::conv2d_backward_input(&dz, input.shape(), &self.blocks[layer - 1].kernel, PADDING)?;
            pending = Some(if layer > 1 {
                match &trace.pool_masks[layer - 2] {
                    Some(mask) => ops::maxpool2_backward(&dx, mask)?,
                    None => dx,
                }
            } else {
                dx
            });
        }
        Ok(pending.expect("depth >= 1"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for block in &self.blocks {
            let s = block.kernel.shape();
            out.extend_from_slice(&(s[0] as u32).to_le_bytes());
            out.extend_from_slice(&(s[1] as u32).to_le_bytes());
            for v in block.kernel.data().iter().chain(block.bias.data()) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err("bad magic, expected TSTW".into());
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(format!("unsupported weights version {version}"));
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for b in 0..NUM_BLOCKS {
            let (c_out, c_in) = (r.u32()? as usize, r.u32()? as usize);
            if (c_in, c_out) != (CHANNEL_PLAN[b], CHANNEL_PLAN[b + 1]) {
                return Err(format!(
                    "block {} is {c_in}->{c_out}, architecture needs {}->{}",
                    b + 1,
                    CHANNEL_PLAN[b],
                    CHANNEL_PLAN[b + 1]
                ));
            }
            let kernel = r.f64s::<T>(c_out * c_in * KERNEL_SIZE * KERNEL_SIZE)?;
            let bias = r.f64s::<T>(c_out)?;
            blocks.push(ConvBlock {
                kernel: Tensor::new(vec![c_out, c_in, KERNEL_SIZE, KERNEL_SIZE], kernel)
                    .map_err(|e| e.to_string())?,
                bias: Tensor::new(vec![c_out], bias).map_err(|e| e.to_string())?,
            });
        }
        if !r.is_done() {
            return Err("trailing bytes after last block".into());
        }
        Self::from_blocks(blocks).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

/// Little-endian cursor shared by the binary artifact readers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s<T: Scalar>(&mut self, n: usize) -> std::result::Result<Vec<T>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
