//! Window multi-head self-attention blocks.
//!
//! A block runs two passes, the second on a feature map cyclically shifted
//! by half a window. Each pass is `f += MSA(f); f += MLP(LN(f))`: there is
//! no normalization in front of the attention. Pairs of tokens that share a
//! shifted window but were not neighbours before the shift (they met across
//! the wrap-around seam) are excluded from attention outright.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::layers::{gelu, gelu_grad, trunc_normal, LayerNorm, LayerNormCache, Linear};
use super::{ParamTensors, TensorMut, TensorRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token ordering and masking for one attention pass on an `h × w` map.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    /// `order[t]` is the feature-map row placed at window-ordered slot `t`.
    order: Vec<usize>,
    /// Region label per window-ordered slot; attention needs equal labels.
    labels: Vec<u8>,
    /// Relative-position bias row for every `(query, key)` pair of a window.
    rel_index: Vec<usize>,
}

fn region(coord: usize, n: usize, window: usize, shift: usize) -> u8 {
    if shift == 0 || coord < n - window {
        0
    } else if coord < n - shift {
        1
    } else {
        2
    }
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(Error::InvalidParameter(format!(
                "window {window} does not tile a {height}x{width} map"
            )));
        }
        if shift >= window {
            return Err(Error::InvalidParameter(format!(
                "shift {shift} must be smaller than window {window}"
            )));
        }
        let n = window * window;
        let per_row = width / window;
        let windows = (height / window) * per_row;
        let mut order = Vec::with_capacity(windows * n);
        let mut labels = Vec::with_capacity(windows * n);
        for wi in 0..windows {
            let (wy, wx) = (wi / per_row, wi % per_row);
            for p in 0..n {
                let ry = wy * window + p / window;
                let rx = wx * window + p % window;
                let oy = (ry + shift) % height;
                let ox = (rx + shift) % width;
                order.push(oy * width + ox);
                labels.push(
                    region(ry, height, window, shift) * 3 + region(rx, width, window, shift),
                );
            }
        }
        let side = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(n * n);
        for p in 0..n {
            for q in 0..n {
                let dy = (p / window) + window - 1 - (q / window);
                let dx = (p % window) + window - 1 - (q % window);
                rel_index.push(dy * side + dx);
            }
        }
        Ok(Self {
            height,
            width,
            window,
            shift,
            order,
            labels,
            rel_index,
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn window_count(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    /// Feature-map token index at slot `p` of window `wi`.
    pub fn token(&self, wi: usize, p: usize) -> usize {
        self.order[wi * self.tokens_per_window() + p]
    }

    /// Whether query slot `p` may attend to key slot `q` in window `wi`.
    pub fn allowed(&self, wi: usize, p: usize, q: usize) -> bool {
        let n = self.tokens_per_window();
        self.labels[wi * n + p] == self.labels[wi * n + q]
    }

    pub fn bias_table_rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    fn gather<T: Scalar>(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros(x.dim());
        for (t, &src) in self.order.iter().enumerate() {
            out.row_mut(t).assign(&x.row(src));
        }
        out
    }

    /// Inverse of `gather`, accumulating into `dst`.
    fn scatter_add<T: Scalar>(&self, windowed: &Array2<T>, dst: &mut Array2<T>) {
        for (t, &d) in self.order.iter().enumerate() {
            let mut row = dst.row_mut(d);
            row += &windowed.row(t);
        }
    }
}

/// Parameters of one attention pass plus its MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinPass<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    /// `((2·window − 1)², heads)`.
    pub rel_bias: Array2<T>,
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> SwinPass<T> {
    pub fn zeros(channels: usize, heads: usize, window: usize, mlp_ratio: usize) -> Self {
        let side = 2 * window - 1;
        Self {
            qkv: Linear::zeros(channels, 3 * channels),
            proj: Linear::zeros(channels, channels),
            rel_bias: Array2::zeros((side * side, heads)),
            norm: LayerNorm::zeros(channels),
            fc1: Linear::zeros(channels, mlp_ratio * channels),
            fc2: Linear::zeros(mlp_ratio * channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(channels, heads, window, mlp_ratio);
        p.qkv.weight = trunc_normal(rng, p.qkv.weight.dim(), 0.02);
        p.proj.weight = trunc_normal(rng, p.proj.weight.dim(), 0.02);
        p.fc1.weight = trunc_normal(rng, p.fc1.weight.dim(), 0.02);
        p.fc2.weight = trunc_normal(rng, p.fc2.weight.dim(), 0.02);
        p.norm = LayerNorm::identity(channels);
        p
    }

    fn heads(&self) -> usize {
        self.rel_bias.ncols()
    }
}

impl<T: Scalar> ParamTensors<T> for SwinPass<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.qkv.tensors(&format!("{prefix}.qkv"), out);
        self.proj.tensors(&format!("{prefix}.proj"), out);
        out.push(TensorRef::new(format!("{prefix}.rel_bias"), &self.rel_bias));
        self.norm.tensors(&format!("{prefix}.norm"), out);
        self.fc1.tensors(&format!("{prefix}.fc1"), out);
        self.fc2.tensors(&format!("{prefix}.fc2"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.qkv.tensors_mut(&format!("{prefix}.qkv"), out);
        self.proj.tensors_mut(&format!("{prefix}.proj"), out);
        out.push(TensorMut::new(format!("{prefix}.rel_bias"), &mut self.rel_bias));
        self.norm.tensors_mut(&format!("{prefix}.norm"), out);
        self.fc1.tensors_mut(&format!("{prefix}.fc1"), out);
        self.fc2.tensors_mut(&format!("{prefix}.fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct PassCache<T> {
    windowed: Array2<T>,
    qkv: Array2<T>,
    /// Softmax weights, `(windows·heads, n, n)`.
    attn: Array3<T>,
    attended: Array2<T>,
    norm: LayerNormCache<T>,
    normed: Array2<T>,
    hidden: Array2<T>,
    activated: Array2<T>,
}

impl<T> PassCache<T> {
    /// Attention weights indexed `[window·heads + head, query, key]`.
    pub fn attention(&self) -> &Array3<T> {
        &self.attn
    }
}

fn pass_forward<T: Scalar>(
    p: &SwinPass<T>,
    layout: &WindowLayout,
    x: &Array2<T>,
) -> (Array2<T>, PassCache<T>) {
    let c = x.ncols();
    let heads = p.heads();
    let dh = c / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let n = layout.tokens_per_window();
    let nw = layout.window_count();

    let windowed = layout.gather(x);
    let qkv = p.qkv.forward(&windowed.view());
    let bias = p.rel_bias.as_slice().expect("standard layout parameter");
    let mut attn = Array3::<T>::zeros((nw * heads, n, n));
    let mut attended = Array2::<T>::zeros((nw * n, c));
    for wi in 0..nw {
        let rows = wi * n..(wi + 1) * n;
        for hd in 0..heads {
            let q = qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), c + hd * dh..c + (hd + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * c + hd * dh..2 * c + (hd + 1) * dh]);
            let mut a = q.dot(&k.t());
            let labels = &layout.labels[wi * n..(wi + 1) * n];
            let a_flat = a.as_slice_mut().expect("fresh product is contiguous");
            for (i, row) in a_flat.chunks_exact_mut(n).enumerate() {
                let rel = &layout.rel_index[i * n..(i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if labels[i] == labels[j] {
                        let s = row[j] * scale + bias[rel[j] * heads + hd];
                        row[j] = s;
                        max = max.max(s);
                    } else {
                        row[j] = T::neg_infinity();
                    }
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = if v.is_finite() { (*v - max).exp() } else { T::zero() };
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            attended
                .slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh])
                .assign(&a.dot(&v));
            attn.index_axis_mut(Axis(0), wi * heads + hd).assign(&a);
        }
    }
    let projected = p.proj.forward(&attended.view());
    let mut x1 = x.clone();
    layout.scatter_add(&projected, &mut x1);

    let (normed, norm) = p.norm.forward(&x1);
    let hidden = p.fc1.forward(&normed.view());
    let activated = hidden.mapv(gelu);
    let mlp = p.fc2.forward(&activated.view());
    let out = x1 + &mlp;
    (
        out,
        PassCache {
            windowed,
            qkv,
            attn,
            attended,
            norm,
            normed,
            hidden,
            activated,
        },
    )
}

fn pass_backward<T: Scalar>(
    p: &SwinPass<T>,
    layout: &WindowLayout,
    cache: &PassCache<T>,
    dout: &Array2<T>,
    grad: &mut SwinPass<T>,
) -> Array2<T> {
    let c = dout.ncols();
    let heads = p.heads();
    let dh = c / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let n = layout.tokens_per_window();
    let nw = layout.window_count();

    // MLP branch.
    let d_act = p.fc2.backward(&cache.activated.view(), dout, &mut grad.fc2);
    let mut d_hidden = d_act;
    ndarray::Zip::from(&mut d_hidden)
        .and(&cache.hidden)
        .for_each(|d, &h| *d *= gelu_grad(h));
    let d_normed = p.fc1.backward(&cache.normed.view(), &d_hidden, &mut grad.fc1);
    let dx1 = dout + &p.norm.backward(&cache.norm, &d_normed, &mut grad.norm);

    // Attention branch.
    let d_proj = layout.gather(&dx1);
    let d_att = p.proj.backward(&cache.attended.view(), &d_proj, &mut grad.proj);
    let mut d_qkv = Array2::<T>::zeros(cache.qkv.dim());
    let qkv = &cache.qkv;
    let bias_grad = grad.rel_bias.as_slice_mut().expect("standard layout parameter");
    for wi in 0..nw {
        let rows = wi * n..(wi + 1) * n;
        for hd in 0..heads {
            let a = cache.attn.index_axis(Axis(0), wi * heads + hd);
            let q = qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), c + hd * dh..c + (hd + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * c + hd * dh..2 * c + (hd + 1) * dh]);
            let d_o = d_att.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
            let da = d_o.dot(&v.t());
            let dv = a.t().dot(&d_o);
            let a_flat = a.as_slice().expect("attention slab is contiguous");
            let da_flat = da.as_slice().expect("fresh product is contiguous");
            let mut ds = vec![T::zero(); n * n];
            for i in 0..n {
                let (ar, dar) = (&a_flat[i * n..(i + 1) * n], &da_flat[i * n..(i + 1) * n]);
                let rel = &layout.rel_index[i * n..(i + 1) * n];
                let dot: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
                for j in 0..n {
                    let g = ar[j] * (dar[j] - dot);
                    ds[i * n + j] = g;
                    bias_grad[rel[j] * heads + hd] += g;
                }
            }
            let ds = Array2::from_shape_vec((n, n), ds).expect("n·n entries");
            let dq = ds.dot(&k) * scale;
            let dk = ds.t().dot(&q) * scale;
            d_qkv.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh]).assign(&dq);
            d_qkv
                .slice_mut(s![rows.clone(), c + hd * dh..c + (hd + 1) * dh])
                .assign(&dk);
            d_qkv
                .slice_mut(s![rows.clone(), 2 * c + hd * dh..2 * c + (hd + 1) * dh])
                .assign(&dv);
        }
    }
    let d_windowed = p.qkv.backward(&cache.windowed.view(), &d_qkv, &mut grad.qkv);
    let mut dx = dx1;
    layout.scatter_add(&d_windowed, &mut dx);
    dx
}

/// Two attention passes at a fixed resolution: unshifted, then shifted by
/// half a window.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinBlock<T> {
    pub layouts: [WindowLayout; 2],
    pub passes: [SwinPass<T>; 2],
}

pub type BlockCache<T> = [PassCache<T>; 2];

impl<T: Scalar> SwinBlock<T> {
    pub fn layouts(height: usize, width: usize, window: usize) -> Result<[WindowLayout; 2]> {
        Ok([
            WindowLayout::new(height, width, window, 0)?,
            WindowLayout::new(height, width, window, window / 2)?,
        ])
    }

    pub fn zeros(
        height: usize,
        width: usize,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            layouts: Self::layouts(height, width, window)?,
            passes: [
                SwinPass::zeros(channels, heads, window, mlp_ratio),
                SwinPass::zeros(channels, heads, window, mlp_ratio),
            ],
        })
    }

    pub fn init<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layouts = Self::layouts(height, width, window)?;
        let first = SwinPass::init(channels, heads, window, mlp_ratio, rng);
        let second = SwinPass::init(channels, heads, window, mlp_ratio, rng);
        Ok(Self {
            layouts,
            passes: [first, second],
        })
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, BlockCache<T>) {
        let (y0, c0) = pass_forward(&self.passes[0], &self.layouts[0], x);
        let (y1, c1) = pass_forward(&self.passes[1], &self.layouts[1], &y0);
        (y1, [c0, c1])
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let [g0, g1] = &mut grad.passes;
        let d0 = pass_backward(&self.passes[1], &self.layouts[1], &cache[1], dy, g1);
        pass_backward(&self.passes[0], &self.layouts[0], &cache[0], &d0, g0)
    }
}

impl<T: Scalar> ParamTensors<T> for SwinBlock<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.passes[0].tensors(&format!("{prefix}.pass0"), out);
        self.passes[1].tensors(&format!("{prefix}.pass1"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let [a, b] = &mut self.passes;
        a.tensors_mut(&format!("{prefix}.pass0"), out);
        b.tensors_mut(&format!("{prefix}.pass1"), out);
    }
}

/// Applies one pass in isolation; exposed for inspection and testing.
pub fn swin_pass<T: Scalar>(
    pass: &SwinPass<T>,
    layout: &WindowLayout,
    x: &ArrayView2<'_, T>,
) -> (Array2<T>, PassCache<T>) {
    pass_forward(pass, layout, &x.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Whether two map coordinates were neighbours without wrapping, i.e.
    /// the cyclic shift moved them by the same displacement.
    fn no_wrap(layout: &WindowLayout, wi: usize, p: usize, q: usize) -> bool {
        let w = layout.width;
        let win = layout.window;
        let per_row = w / win;
        let rolled = |slot: usize| {
            (
                (wi / per_row) * win + slot / win,
                (wi % per_row) * win + slot % win,
            )
        };
        let (ap, bp) = (layout.token(wi, p), layout.token(wi, q));
        let (ry1, rx1) = rolled(p);
        let (ry2, rx2) = rolled(q);
        let (oy1, ox1) = (ap / w, ap % w);
        let (oy2, ox2) = (bp / w, bp % w);
        oy1 as isize - oy2 as isize == ry1 as isize - ry2 as isize
            && ox1 as isize - ox2 as isize == rx1 as isize - rx2 as isize
    }

    #[test]
    fn shifted_mask_matches_pair_enumeration() {
        let layout = WindowLayout::new(8, 8, 4, 2).unwrap();
        let n = layout.tokens_per_window();
        let mut blocked = 0;
        for wi in 0..layout.window_count() {
            for p in 0..n {
                for q in 0..n {
                    let expect = no_wrap(&layout, wi, p, q);
                    assert_eq!(layout.allowed(wi, p, q), expect, "window {wi} pair ({p},{q})");
                    blocked += usize::from(!expect);
                }
            }
        }
        assert!(blocked > 0);
        let plain = WindowLayout::new(8, 8, 4, 0).unwrap();
        for wi in 0..4 {
            for p in 0..n {
                for q in 0..n {
                    assert!(plain.allowed(wi, p, q));
                }
            }
        }
    }

    #[test]
    fn layout_is_a_permutation() {
        let layout = WindowLayout::new(8, 12, 4, 2).unwrap();
        let mut seen = layout.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..96).collect::<Vec<_>>());
        assert!(WindowLayout::new(8, 10, 4, 0).is_err());
    }

    #[test]
    fn zero_branch_outputs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = SwinBlock::<f64>::init(8, 8, 8, 2, 4, 4, &mut rng).unwrap();
        for p in &mut block.passes {
            p.proj.weight.fill(0.0);
            p.fc2.weight.fill(0.0);
        }
        let x = trunc_normal(&mut rng, (64, 8), 1.0);
        let (y, _) = block.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = SwinBlock::<f64>::init(8, 8, 8, 2, 4, 4, &mut rng).unwrap();
        let x = trunc_normal(&mut rng, (64, 8), 1.0);
        let (_, caches) = block.forward(&x);
        for (cache, layout) in caches.iter().zip(&block.layouts) {
            let a = cache.attention();
            for m in 0..a.shape()[0] {
                let wi = m / 2;
                for i in 0..16 {
                    let row = a.slice(s![m, i, ..]);
                    assert!((row.sum() - 1.0).abs() <= 1e-12);
                    for j in 0..16 {
                        if !layout.allowed(wi, i, j) {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}
