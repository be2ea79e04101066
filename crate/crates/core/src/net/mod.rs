//! The anomaly-enhancement reconstruction network.
//!
//! ```text
//! x ─conv3×3→ C ─swin→ skip₁ ─down→ 2C ─swin→ skip₂ ─down→ 4C ─swin
//!   ─up→ 2C ‖ skip₂ ─1×1→ 2C ─swin ─up→ C ‖ skip₁ ─1×1→ C ─swin ─conv3×3→ B ─(+x)→ y
//! ```
//!
//! Downsampling is a 4×4 stride-2 convolution (padding 1), upsampling a 2×2
//! stride-2 transposed convolution. Window side at each resolution is the
//! side divided by `window_partition`, so every attention block sees the
//! same window grid.

pub mod checkpoint;
pub mod layers;
pub mod swin;

use ndarray::{concatenate, s, Array2, Axis, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::msgms::{l2_loss_grad, msgms_loss_grad, MsgmsConfig};
use crate::scalar::Scalar;
use layers::{fan_in_uniform, Conv2d, ConvCache, FeatureMap, Linear, UpConv};
use swin::{BlockCache, SwinBlock};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Feature channels `C` after the encoder convolution.
    pub channels: usize,
    /// Heads of the five attention blocks: encoder 1, encoder 2, bottleneck,
    /// decoder 1, decoder 2.
    pub heads: [usize; 5],
    /// Windows per side at every resolution.
    pub window_partition: usize,
    pub mlp_ratio: usize,
    /// `(height, width, bands)` of the input cube.
    pub input_size: (usize, usize, usize),
    /// Zero the decoder convolution so the network starts as the identity.
    #[serde(default)]
    pub zero_residual_start: bool,
}

impl NetworkConfig {
    /// Default architecture for a given input size.
    pub fn for_input(height: usize, width: usize, bands: usize) -> Self {
        Self {
            channels: 32,
            heads: [2, 4, 8, 4, 2],
            window_partition: 8,
            mlp_ratio: 4,
            input_size: (height, width, bands),
            zero_residual_start: false,
        }
    }

    /// Channels at each attention block.
    pub fn block_channels(&self) -> [usize; 5] {
        let c = self.channels;
        [c, 2 * c, 4 * c, 2 * c, c]
    }

    /// `(height, width)` at each attention block.
    pub fn block_sizes(&self) -> [(usize, usize); 5] {
        let (h, w, _) = self.input_size;
        let full = (h, w);
        let half = (h / 2, w / 2);
        let quarter = (h / 4, w / 4);
        [full, half, quarter, half, full]
    }

    pub fn block_windows(&self) -> [usize; 5] {
        self.block_sizes().map(|(h, _)| h / self.window_partition.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let (h, w, b) = self.input_size;
        if self.channels == 0 || b == 0 || self.mlp_ratio == 0 || self.window_partition == 0 {
            return bad("channels, bands, mlp_ratio and window_partition must be positive".into());
        }
        let unit = 4 * self.window_partition;
        if h % unit != 0 || w % unit != 0 {
            return bad(format!(
                "{h}x{w} input: each side must be divisible by 4·window_partition = {unit}"
            ));
        }
        if h / self.window_partition != w / self.window_partition {
            return bad("square windows need a square window grid; use a square input".into());
        }
        for (i, (&c, &heads)) in self.block_channels().iter().zip(&self.heads).enumerate() {
            if heads == 0 || c % heads != 0 {
                return bad(format!("block {i}: {c} channels not divisible by {heads} heads"));
            }
        }
        Ok(())
    }
}

/// A named, shaped view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<'a, T> TensorRef<'a, T> {
    pub fn new<D: Dimension>(name: String, a: &'a ndarray::Array<T, D>) -> Self {
        Self {
            name,
            shape: a.shape().to_vec(),
            data: a.as_slice().expect("standard layout parameter"),
        }
    }
}

#[derive(Debug)]
pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<'a, T> TensorMut<'a, T> {
    pub fn new<D: Dimension>(name: String, a: &'a mut ndarray::Array<T, D>) -> Self {
        Self {
            name,
            shape: a.shape().to_vec(),
            data: a.as_slice_mut().expect("standard layout parameter"),
        }
    }
}

/// Enumerates parameter tensors in a fixed order.
pub trait ParamTensors<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>);
}

/// Every learnable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub conv_in: Conv2d<T>,
    pub enc1: SwinBlock<T>,
    pub down1: Conv2d<T>,
    pub enc2: SwinBlock<T>,
    pub down2: Conv2d<T>,
    pub bottleneck: SwinBlock<T>,
    pub up1: UpConv<T>,
    pub fuse1: Linear<T>,
    pub dec1: SwinBlock<T>,
    pub up2: UpConv<T>,
    pub fuse2: Linear<T>,
    pub dec2: SwinBlock<T>,
    pub conv_out: Conv2d<T>,
}

impl<T: Scalar> NetParams<T> {
    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, _, bands) = cfg.input_size;
        let c = cfg.channels;
        let sizes = cfg.block_sizes();
        let ch = cfg.block_channels();
        let win = cfg.block_windows();
        let block = |i: usize| {
            SwinBlock::zeros(sizes[i].0, sizes[i].1, ch[i], cfg.heads[i], win[i], cfg.mlp_ratio)
        };
        Ok(Self {
            conv_in: Conv2d::zeros(bands, c, 3, 1, 1),
            enc1: block(0)?,
            down1: Conv2d::zeros(c, 2 * c, 4, 2, 1),
            enc2: block(1)?,
            down2: Conv2d::zeros(2 * c, 4 * c, 4, 2, 1),
            bottleneck: block(2)?,
            up1: UpConv::zeros(4 * c, 2 * c),
            fuse1: Linear::zeros(4 * c, 2 * c),
            dec1: block(3)?,
            up2: UpConv::zeros(2 * c, c),
            fuse2: Linear::zeros(2 * c, c),
            dec2: block(4)?,
            conv_out: Conv2d::zeros(c, bands, 3, 1, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        ParamTensors::tensors(self, "", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        ParamTensors::tensors_mut(self, "", &mut out);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self, cfg: &NetworkConfig) -> Result<NetParams<U>> {
        let mut out = NetParams::<U>::zeros(cfg)?;
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.as_f64());
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> ParamTensors<T> for NetParams<T> {
    fn tensors<'a>(&'a self, _prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.conv_in.tensors("conv_in", out);
        self.enc1.tensors("enc1", out);
        self.down1.tensors("down1", out);
        self.enc2.tensors("enc2", out);
        self.down2.tensors("down2", out);
        self.bottleneck.tensors("bottleneck", out);
        self.up1.tensors("up1", out);
        self.fuse1.tensors("fuse1", out);
        self.dec1.tensors("dec1", out);
        self.up2.tensors("up2", out);
        self.fuse2.tensors("fuse2", out);
        self.dec2.tensors("dec2", out);
        self.conv_out.tensors("conv_out", out);
    }

    fn tensors_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.conv_in.tensors_mut("conv_in", out);
        self.enc1.tensors_mut("enc1", out);
        self.down1.tensors_mut("down1", out);
        self.enc2.tensors_mut("enc2", out);
        self.down2.tensors_mut("down2", out);
        self.bottleneck.tensors_mut("bottleneck", out);
        self.up1.tensors_mut("up1", out);
        self.fuse1.tensors_mut("fuse1", out);
        self.dec1.tensors_mut("dec1", out);
        self.up2.tensors_mut("up2", out);
        self.fuse2.tensors_mut("fuse2", out);
        self.dec2.tensors_mut("dec2", out);
        self.conv_out.tensors_mut("conv_out", out);
    }
}

/// Random initialization: truncated normal (std 0.02) for attention and MLP
/// weights, fan-in scaled uniform for convolution kernels, zero biases and
/// zero relative-position tables.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<NetParams<T>> {
    cfg.validate()?;
    let (_, _, bands) = cfg.input_size;
    let c = cfg.channels;
    let sizes = cfg.block_sizes();
    let ch = cfg.block_channels();
    let win = cfg.block_windows();
    let mut p = NetParams::<T>::zeros(cfg)?;

    let conv = |layer: &mut Conv2d<T>, fan_in: usize, rng: &mut R| {
        layer.linear.weight = fan_in_uniform(rng, layer.linear.weight.dim(), fan_in);
    };
    conv(&mut p.conv_in, 9 * bands, rng);
    p.enc1 = SwinBlock::init(sizes[0].0, sizes[0].1, ch[0], cfg.heads[0], win[0], cfg.mlp_ratio, rng)?;
    conv(&mut p.down1, 16 * c, rng);
    p.enc2 = SwinBlock::init(sizes[1].0, sizes[1].1, ch[1], cfg.heads[1], win[1], cfg.mlp_ratio, rng)?;
    conv(&mut p.down2, 32 * c, rng);
    p.bottleneck =
        SwinBlock::init(sizes[2].0, sizes[2].1, ch[2], cfg.heads[2], win[2], cfg.mlp_ratio, rng)?;
    p.up1.weight = fan_in_uniform(rng, p.up1.weight.dim(), 4 * c);
    p.fuse1.weight = fan_in_uniform(rng, p.fuse1.weight.dim(), 4 * c);
    p.dec1 = SwinBlock::init(sizes[3].0, sizes[3].1, ch[3], cfg.heads[3], win[3], cfg.mlp_ratio, rng)?;
    p.up2.weight = fan_in_uniform(rng, p.up2.weight.dim(), 2 * c);
    p.fuse2.weight = fan_in_uniform(rng, p.fuse2.weight.dim(), 2 * c);
    p.dec2 = SwinBlock::init(sizes[4].0, sizes[4].1, ch[4], cfg.heads[4], win[4], cfg.mlp_ratio, rng)?;
    if !cfg.zero_residual_start {
        conv(&mut p.conv_out, 9 * c, rng);
    }
    Ok(p)
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    conv_in: ConvCache<T>,
    enc1: BlockCache<T>,
    down1: ConvCache<T>,
    enc2: BlockCache<T>,
    down2: ConvCache<T>,
    bottleneck: BlockCache<T>,
    bottleneck_out: FeatureMap<T>,
    cat1: Array2<T>,
    dec1: BlockCache<T>,
    dec1_out: FeatureMap<T>,
    cat2: Array2<T>,
    dec2: BlockCache<T>,
    conv_out: ConvCache<T>,
    body: HsiCube<T>,
}

impl<T> ForwardCache<T> {
    /// Output of the network body, before the input is added back.
    pub fn body(&self) -> &HsiCube<T> {
        &self.body
    }

    /// The ten attention caches in network order.
    pub fn blocks(&self) -> [&BlockCache<T>; 5] {
        [&self.enc1, &self.enc2, &self.bottleneck, &self.dec1, &self.dec2]
    }
}

fn check_input<T: Scalar>(x: &HsiCube<T>, cfg: &NetworkConfig) -> Result<()> {
    if x.dims() != cfg.input_size {
        return Err(Error::ShapeMismatch {
            expected: cfg.input_size,
            actual: x.dims(),
        });
    }
    Ok(())
}

/// Forward pass that also returns the activations needed for gradients.
pub fn forward_cached<T: Scalar>(
    x: &HsiCube<T>,
    p: &NetParams<T>,
    cfg: &NetworkConfig,
) -> Result<(HsiCube<T>, ForwardCache<T>)> {
    check_input(x, cfg)?;
    let (h, w, _) = cfg.input_size;
    let input = FeatureMap::new(h, w, x.pixels());

    let (f, conv_in) = p.conv_in.forward(&input);
    let (e1, enc1) = p.enc1.forward(&f.data);
    let skip1 = FeatureMap::new(h, w, e1);
    let (f, down1) = p.down1.forward(&skip1);
    let (e2, enc2) = p.enc2.forward(&f.data);
    let skip2 = FeatureMap::new(f.height, f.width, e2);
    let (f, down2) = p.down2.forward(&skip2);
    let (b, bottleneck) = p.bottleneck.forward(&f.data);
    let bottleneck_out = FeatureMap::new(f.height, f.width, b);

    let u1 = p.up1.forward(&bottleneck_out);
    let cat1 = concatenate(Axis(1), &[u1.data.view(), skip2.data.view()]).expect("same rows");
    let fused = p.fuse1.forward(&cat1.view());
    let (d1, dec1) = p.dec1.forward(&fused);
    let dec1_out = FeatureMap::new(u1.height, u1.width, d1);

    let u2 = p.up2.forward(&dec1_out);
    let cat2 = concatenate(Axis(1), &[u2.data.view(), skip1.data.view()]).expect("same rows");
    let fused = p.fuse2.forward(&cat2.view());
    let (d2, dec2) = p.dec2.forward(&fused);
    let (body, conv_out) = p.conv_out.forward(&FeatureMap::new(h, w, d2));

    let out = &input.data + &body.data;
    let y = HsiCube::from_pixels(h, w, &out);
    let body = HsiCube::from_pixels(h, w, &body.data);
    let cache = ForwardCache {
        conv_in,
        enc1,
        down1,
        enc2,
        down2,
        bottleneck,
        bottleneck_out,
        cat1,
        dec1,
        dec1_out,
        cat2,
        dec2,
        conv_out,
        body,
    };
    Ok((y, cache))
}

/// `x + body(x)`; output shape equals input shape.
pub fn forward<T: Scalar>(x: &HsiCube<T>, p: &NetParams<T>, cfg: &NetworkConfig) -> Result<HsiCube<T>> {
    forward_cached(x, p, cfg).map(|(y, _)| y)
}

/// Parameter gradients given `dL/dy` for the output cube.
pub fn backward<T: Scalar>(
    p: &NetParams<T>,
    cache: &ForwardCache<T>,
    d_out: &HsiCube<T>,
) -> NetParams<T> {
    let mut g = p.zeros_like();
    let dy = d_out.pixels();
    let c = p.fuse2.weight.ncols();

    let d = p
        .conv_out
        .backward(&cache.conv_out, &dy, &mut g.conv_out, true)
        .expect("input gradient requested");
    let d = p.dec2.backward(&cache.dec2, &d, &mut g.dec2);
    let d_cat2 = p.fuse2.backward(&cache.cat2.view(), &d, &mut g.fuse2);
    let d_u2 = d_cat2.slice(s![.., ..c]).to_owned();
    let mut d_skip1 = d_cat2.slice(s![.., c..]).to_owned();
    let d = p.up2.backward(&cache.dec1_out, &d_u2, &mut g.up2);

    let d = p.dec1.backward(&cache.dec1, &d, &mut g.dec1);
    let d_cat1 = p.fuse1.backward(&cache.cat1.view(), &d, &mut g.fuse1);
    let d_u1 = d_cat1.slice(s![.., ..2 * c]).to_owned();
    let mut d_skip2 = d_cat1.slice(s![.., 2 * c..]).to_owned();
    let d = p.up1.backward(&cache.bottleneck_out, &d_u1, &mut g.up1);

    let d = p.bottleneck.backward(&cache.bottleneck, &d, &mut g.bottleneck);
    d_skip2 += &p
        .down2
        .backward(&cache.down2, &d, &mut g.down2, true)
        .expect("input gradient requested");
    let d = p.enc2.backward(&cache.enc2, &d_skip2, &mut g.enc2);
    d_skip1 += &p
        .down1
        .backward(&cache.down1, &d, &mut g.down1, true)
        .expect("input gradient requested");
    let d = p.enc1.backward(&cache.enc1, &d_skip1, &mut g.enc1);
    p.conv_in.backward(&cache.conv_in, &d, &mut g.conv_in, false);
    g
}

/// Reconstruction objective used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum LossKind {
    #[default]
    Msgms,
    L2,
}

/// Loss between the original cube and the reconstruction of the masked cube,
/// with exact gradients for every parameter.
pub fn loss_and_grad<T: Scalar>(
    x_masked: &HsiCube<T>,
    x_orig: &HsiCube<T>,
    p: &NetParams<T>,
    cfg: &NetworkConfig,
    loss: LossKind,
    msgms: &MsgmsConfig,
) -> Result<(T, NetParams<T>)> {
    x_masked.same_shape(x_orig)?;
    let (y, cache) = forward_cached(x_masked, p, cfg)?;
    let (value, d_y) = match loss {
        LossKind::Msgms => msgms_loss_grad(x_orig, &y, msgms)?,
        LossKind::L2 => l2_loss_grad(x_orig, &y)?,
    };
    Ok((value, backward(p, &cache, &d_y)))
}
