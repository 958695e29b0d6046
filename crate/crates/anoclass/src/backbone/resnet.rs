//! Minimal inference engine for bottleneck residual networks.
//!
//! Weights come from a [`TensorArchive`] whose tensor names follow the usual
//! convention for 50-layer residual networks (`conv1.weight`, `bn1.*`,
//! `layer1.0.conv1.weight`, `layer1.0.downsample.0.weight`, ...), so weights
//! exported from a reference implementation drop in directly. Inference is
//! pure f32 with fixed accumulation order, so repeated runs are bit-identical.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorArchive;

const BN_EPS: f32 = 1e-5;

/// Architecture descriptor for a bottleneck residual network.
///
/// `stage_channels` are the inner (bottleneck) widths; the output width of
/// stage `i` is `stage_channels[i] * expansion`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub id: String,
    pub stem_channels: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub expansion: usize,
}

impl ResNetSpec {
    /// The standard 50-layer configuration: stages of 3/4/6/3 bottlenecks.
    pub fn resnet50() -> Self {
        ResNetSpec {
            id: "resnet50".to_string(),
            stem_channels: 64,
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [64, 128, 256, 512],
            expansion: 4,
        }
    }

    /// Narrow variant with the same topology, for tests and demos.
    pub fn tiny(width: usize) -> Self {
        ResNetSpec {
            id: format!("tiny-resnet-w{width}"),
            stem_channels: width,
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [width, 2 * width, 4 * width, 8 * width],
            expansion: 4,
        }
    }

    /// Output channel count after stage `i` (0-based).
    pub fn stage_out_channels(&self, stage: usize) -> usize {
        self.stage_channels[stage] * self.expansion
    }

    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "backbone",
            "arch": "bottleneck-residual",
            "id": self.id,
            "stem_channels": self.stem_channels,
            "stage_blocks": self.stage_blocks,
            "stage_channels": self.stage_channels,
            "expansion": self.expansion,
        })
    }

    fn from_descriptor(desc: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(desc.clone()).ok()
    }

    /// Builds an archive with seeded random weights. Produces a fully
    /// functional (untrained) backbone; demos and tests use this in place of
    /// pretrained weights.
    pub fn synthetic_archive(&self, seed: u64) -> TensorArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = TensorArchive::new(self.descriptor());

        let conv = |a: &mut TensorArchive, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, k: usize| {
            let fan_in = (i * k * k) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            let data: Vec<f32> = (0..o * i * k * k)
                .map(|_| dist.sample(rng) as f32)
                .collect();
            a.insert(name, vec![o, i, k, k], data);
        };
        let bn = |a: &mut TensorArchive, name: &str, c: usize| {
            a.insert(format!("{name}.weight"), vec![c], vec![1.0; c]);
            a.insert(format!("{name}.bias"), vec![c], vec![0.0; c]);
            a.insert(format!("{name}.running_mean"), vec![c], vec![0.0; c]);
            a.insert(format!("{name}.running_var"), vec![c], vec![1.0; c]);
        };

        conv(&mut archive, &mut rng, "conv1.weight", self.stem_channels, 3, 7);
        bn(&mut archive, "bn1", self.stem_channels);

        let mut in_ch = self.stem_channels;
        for (stage, (&blocks, &width)) in self
            .stage_blocks
            .iter()
            .zip(self.stage_channels.iter())
            .enumerate()
        {
            let out_ch = width * self.expansion;
            for block in 0..blocks {
                let prefix = format!("layer{}.{}", stage + 1, block);
                conv(&mut archive, &mut rng, &format!("{prefix}.conv1.weight"), width, in_ch, 1);
                bn(&mut archive, &format!("{prefix}.bn1"), width);
                conv(&mut archive, &mut rng, &format!("{prefix}.conv2.weight"), width, width, 3);
                bn(&mut archive, &format!("{prefix}.bn2"), width);
                conv(&mut archive, &mut rng, &format!("{prefix}.conv3.weight"), out_ch, width, 1);
                bn(&mut archive, &format!("{prefix}.bn3"), out_ch);
                if block == 0 {
                    conv(
                        &mut archive,
                        &mut rng,
                        &format!("{prefix}.downsample.0.weight"),
                        out_ch,
                        in_ch,
                        1,
                    );
                    bn(&mut archive, &format!("{prefix}.downsample.1"), out_ch);
                }
                in_ch = out_ch;
            }
        }
        archive
    }
}

/// Convolution with folded batch-norm scale/shift applied to the output.
#[derive(Debug, Clone)]
struct ConvBn {
    weight: Array4<f32>,
    scale: Array1<f32>,
    shift: Array1<f32>,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    fn apply(&self, x: &ArrayView3<f32>) -> Array3<f32> {
        let mut out = conv2d(x, &self.weight.view(), self.stride, self.pad);
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let (s, t) = (self.scale[c], self.shift[c]);
            plane.mapv_inplace(|v| v * s + t);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn apply(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut y = self.conv1.apply(&x.view());
        relu_inplace(&mut y);
        let mut y = self.conv2.apply(&y.view());
        relu_inplace(&mut y);
        let mut y = self.conv3.apply(&y.view());
        let identity = match &self.downsample {
            Some(d) => d.apply(&x.view()),
            None => x.clone(),
        };
        y += &identity;
        relu_inplace(&mut y);
        y
    }
}

/// Loaded backbone ready for inference.
#[derive(Debug, Clone)]
pub struct ResNet {
    pub spec: ResNetSpec,
    stem: ConvBn,
    stages: Vec<Vec<Bottleneck>>,
    /// Output channels after stage 2, read from the loaded tensor shapes.
    pub c2: usize,
    /// Output channels after stage 3, read from the loaded tensor shapes.
    pub c3: usize,
}

impl ResNet {
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let spec = ResNetSpec::from_descriptor(&archive.descriptor).ok_or_else(|| {
            Error::Capability("archive descriptor is not a bottleneck-residual backbone".into())
        })?;

        let get = |name: &str| -> Result<&crate::io::NamedTensor> {
            archive
                .get(name)
                .ok_or_else(|| Error::Capability(format!("missing tensor {name}")))
        };

        let load_conv_bn = |conv_name: &str, bn_name: &str, stride: usize, pad: usize| -> Result<ConvBn> {
            let w = get(conv_name)?;
            if w.shape.len() != 4 {
                return Err(Error::Shape(format!(
                    "{conv_name}: expected rank-4 weight, got rank {}",
                    w.shape.len()
                )));
            }
            let (o, i, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
            let weight = Array4::from_shape_vec((o, i, kh, kw), w.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            let gamma = get(&format!("{bn_name}.weight"))?;
            let beta = get(&format!("{bn_name}.bias"))?;
            let mean = get(&format!("{bn_name}.running_mean"))?;
            let var = get(&format!("{bn_name}.running_var"))?;
            let mut scale = Array1::zeros(o);
            let mut shift = Array1::zeros(o);
            for c in 0..o {
                let s = gamma.data[c] / (var.data[c] + BN_EPS).sqrt();
                scale[c] = s;
                shift[c] = beta.data[c] - mean.data[c] * s;
            }
            Ok(ConvBn {
                weight,
                scale,
                shift,
                stride,
                pad,
            })
        };

        let stem = load_conv_bn("conv1.weight", "bn1", 2, 3)?;

        let mut stages = Vec::with_capacity(4);
        for stage in 0..4 {
            let blocks = spec.stage_blocks[stage];
            let stage_stride = if stage == 0 { 1 } else { 2 };
            let mut list = Vec::with_capacity(blocks);
            for block in 0..blocks {
                let p = format!("layer{}.{}", stage + 1, block);
                let stride = if block == 0 { stage_stride } else { 1 };
                let conv1 = load_conv_bn(&format!("{p}.conv1.weight"), &format!("{p}.bn1"), 1, 0)?;
                let conv2 = load_conv_bn(&format!("{p}.conv2.weight"), &format!("{p}.bn2"), stride, 1)?;
                let conv3 = load_conv_bn(&format!("{p}.conv3.weight"), &format!("{p}.bn3"), 1, 0)?;
                let downsample = if archive.get(&format!("{p}.downsample.0.weight")).is_some() {
                    Some(load_conv_bn(
                        &format!("{p}.downsample.0.weight"),
                        &format!("{p}.downsample.1"),
                        stride,
                        0,
                    )?)
                } else {
                    None
                };
                list.push(Bottleneck {
                    conv1,
                    conv2,
                    conv3,
                    downsample,
                });
            }
            stages.push(list);
        }

        // Channel metadata comes from the tensors actually loaded, not the
        // descriptor.
        let c2 = stages[1]
            .last()
            .and_then(|b| b.conv3.weight.shape().first().copied())
            .ok_or_else(|| Error::Capability("stage 2 has no blocks".into()))?;
        let c3 = stages[2]
            .last()
            .and_then(|b| b.conv3.weight.shape().first().copied())
            .ok_or_else(|| Error::Capability("stage 3 has no blocks".into()))?;

        Ok(ResNet {
            spec,
            stem,
            stages,
            c2,
            c3,
        })
    }

    /// Runs the stem plus stages 1..=3 and returns the activations after
    /// stage 2 (stride 8) and stage 3 (stride 16).
    pub fn forward_features(&self, input: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
        let x = self.forward_stem(input);
        let mut x = x;
        for b in &self.stages[0] {
            x = b.apply(&x);
        }
        for b in &self.stages[1] {
            x = b.apply(&x);
        }
        let f2 = x.clone();
        for b in &self.stages[2] {
            x = b.apply(&x);
        }
        (f2, x)
    }

    /// Runs all four stages and global-average-pools the result. This is the
    /// feature the direct fine-tuning baseline trains its linear head on.
    pub fn forward_pooled(&self, input: &Array3<f32>) -> Array1<f32> {
        let mut x = self.forward_stem(input);
        for stage in &self.stages {
            for b in stage {
                x = b.apply(&x);
            }
        }
        let (c, h, w) = x.dim();
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = 0f64;
            for v in x.index_axis(ndarray::Axis(0), ch).iter() {
                acc += *v as f64;
            }
            out[ch] = (acc / (h * w) as f64) as f32;
        }
        out
    }

    fn forward_stem(&self, input: &Array3<f32>) -> Array3<f32> {
        let mut x = self.stem.apply(&input.view());
        relu_inplace(&mut x);
        max_pool2d(&x.view(), 3, 2, 1)
    }
}

fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Plain 2-D convolution, no bias: im2col then one matrix product.
pub fn conv2d(
    input: &ArrayView3<f32>,
    weight: &ndarray::ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (ci, h, w) = input.dim();
    let (co, ciw, kh, kw) = weight.dim();
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;

    let mut cols = Array2::<f32>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        let plane = input.index_axis(ndarray::Axis(0), c);
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let mut col_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[oy * wo + ox] = plane[(iy as usize, ix as usize)];
                    }
                }
            }
        }
    }

    let w2 = weight
        .to_shape((co, ci * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let out2 = w2.dot(&cols);
    out2.into_shape_with_order((co, ho, wo)).expect("conv output reshape")
}

/// Max pooling with padding treated as negative infinity.
pub fn max_pool2d(input: &ArrayView3<f32>, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = input.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::from_elem((c, ho, wo), f32::NEG_INFINITY);
    for ch in 0..c {
        let plane = input.index_axis(ndarray::Axis(0), ch);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        best = best.max(plane[(iy as usize, ix as usize)]);
                    }
                }
                out[(ch, oy, ox)] = best;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Array4::from_shape_vec((1, 1, 1, 1), vec![1.0]).unwrap();
        let y = conv2d(&x.view(), &w.view(), 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_sum_kernel_with_padding() {
        // 3x3 all-ones kernel on a single-pixel image: every output within
        // reach of the pixel equals its value.
        let mut x = Array3::zeros((1, 3, 3));
        x[(0, 1, 1)] = 5.0;
        let w = Array4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv2d(&x.view(), &w.view(), 1, 1);
        assert_eq!(y.dim(), (1, 3, 3));
        for v in y.iter() {
            assert_eq!(*v, 5.0);
        }
    }

    #[test]
    fn max_pool_basics() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 7.0, 3.0, 4.0]).unwrap();
        let y = max_pool2d(&x.view(), 2, 2, 0);
        assert_eq!(y.dim(), (1, 1, 1));
        assert_eq!(y[(0, 0, 0)], 7.0);
    }

    #[test]
    fn synthetic_archive_loads_and_reports_channels() {
        let spec = ResNetSpec::tiny(4);
        let archive = spec.synthetic_archive(7);
        let net = ResNet::from_archive(&archive).unwrap();
        // tiny(4): stage widths [4,8,16,32], expansion 4.
        assert_eq!(net.c2, 32);
        assert_eq!(net.c3, 64);
    }

    #[test]
    fn resnet50_channel_metadata() {
        let spec = ResNetSpec::resnet50();
        assert_eq!(spec.stage_out_channels(1), 512);
        assert_eq!(spec.stage_out_channels(2), 1024);
        assert_eq!(spec.stage_out_channels(3), 2048);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ResNetSpec::tiny(2);
        let net = ResNet::from_archive(&spec.synthetic_archive(3)).unwrap();
        let x = Array3::from_shape_fn((3, 64, 64), |(c, y, z)| {
            ((c + 1) as f32 * 0.1) + (y as f32 * 0.01) - (z as f32 * 0.02)
        });
        let (a2, a3) = net.forward_features(&x);
        let (b2, b3) = net.forward_features(&x);
        assert_eq!(a2, b2);
        assert_eq!(a3, b3);
        // stride 8 and stride 16 grids for a 64px input
        assert_eq!(a2.dim(), (net.c2, 8, 8));
        assert_eq!(a3.dim(), (net.c3, 4, 4));
    }
}
