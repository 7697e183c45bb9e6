//! Forward and backward kernels on raw slices. The tape in `mod.rs` owns shape
//! checking; everything here assumes validated geometry.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror without repeating the edge pixel (`[a b c]` pads to `b a b c b`).
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// `table[kk * out + o]` is the source coordinate along one axis, or `usize::MAX`
    /// for a zero-padded position.
    fn axis_table(&self, len: usize, out: usize) -> Vec<usize> {
        let mut table = vec![usize::MAX; self.k * out];
        for kk in 0..self.k {
            for o in 0..out {
                let pos = (o * self.stride + kk) as isize - self.pad as isize;
                let src = if pos >= 0 && (pos as usize) < len {
                    Some(pos as usize)
                } else {
                    match self.mode {
                        PadMode::Zero => None,
                        PadMode::Reflect => {
                            let last = len as isize - 1;
                            let r = if pos < 0 { -pos } else { 2 * last - pos };
                            Some(r as usize)
                        }
                    }
                };
                if let Some(s) = src {
                    table[kk * out + o] = s;
                }
            }
        }
        table
    }
}

pub struct Im2Col {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Im2Col {
    pub fn new(g: &ConvGeom) -> Self {
        Im2Col {
            rows: g.axis_table(g.h, g.oh),
            cols: g.axis_table(g.w, g.ow),
        }
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin·k·k, oh·ow]`.
    pub fn unfold<T: Scalar>(&self, g: &ConvGeom, input: &[T], out: &mut [T]) {
        let p = g.out_pixels();
        for c in 0..g.cin {
            let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let row = (c * g.k + kh) * g.k + kw;
                    let dst = &mut out[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let sy = self.rows[kh * g.oh + oy];
                        let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if sy == usize::MAX {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy * g.w..(sy + 1) * g.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let sx = self.cols[kw * g.ow + ox];
                            *d = if sx == usize::MAX { T::zero() } else { src[sx] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Im2Col::unfold`]: scatter-adds columns back into `[cin, h, w]`.
    pub fn fold_add<T: Scalar>(&self, g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
        let p = g.out_pixels();
        for c in 0..g.cin {
            let plane = &mut grad_in[c * g.h * g.w..(c + 1) * g.h * g.w];
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let row = (c * g.k + kh) * g.k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let sy = self.rows[kh * g.oh + oy];
                        if sy == usize::MAX {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let sx = self.cols[kw * g.ow + ox];
                            if sx != usize::MAX {
                                plane[sy * g.w + sx] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let unfold = Im2Col::new(g);
    let (kl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); kl * p];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for s in 0..g.n {
        unfold.unfold(g, &input[s * g.cin * g.h * g.w..], &mut cols);
        let o = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
        T::gemm(g.cout, kl, p, weight, false, &cols, false, T::zero(), o);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let unfold = Im2Col::new(g);
    let (kl, p) = (g.patch_len(), g.out_pixels());
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); kl * p];
    let mut dcols = vec![T::zero(); kl * p];
    let mut grads = ConvGrads {
        input: vec![T::zero(); if need_input { g.n * in_len } else { 0 }],
        weight: vec![T::zero(); g.cout * kl],
        bias: vec![T::zero(); g.cout],
    };
    for s in 0..g.n {
        let go = &grad_out[s * g.cout * p..(s + 1) * g.cout * p];
        unfold.unfold(g, &input[s * in_len..], &mut cols);
        T::gemm(g.cout, p, kl, go, false, &cols, true, T::one(), &mut grads.weight);
        for co in 0..g.cout {
            grads.bias[co] += go[co * p..(co + 1) * p].iter().copied().sum();
        }
        if need_input {
            T::gemm(kl, g.cout, p, weight, true, go, false, T::zero(), &mut dcols);
            unfold.fold_add(g, &dcols, &mut grads.input[s * in_len..(s + 1) * in_len]);
        }
    }
    grads
}

/// `in[n, c·r² + i·r + j, h, w] -> out[n, c, h·r + i, w·r + j]`
pub fn pixel_shuffle<T: Scalar>(input: &[T], dims: (usize, usize, usize, usize), r: usize, inverse: bool) -> Vec<T> {
    // dims are the shuffled-side (low resolution) dims: n, c·r², h, w
    let (n, cin, h, w) = dims;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); input.len()];
    for s in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let lo = ((s * cin + ci) * h + y) * w + x;
                            let hi = ((s * c + co) * oh + y * r + i) * ow + x * r + j;
                            if inverse {
                                out[lo] = input[hi];
                            } else {
                                out[hi] = input[lo];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Valid-mode separable correlation with the same 1-D kernel along H and W.
pub fn separable_filter<T: Scalar>(input: &[T], dims: (usize, usize, usize, usize), kernel: &[T]) -> Vec<T> {
    let (n, c, h, w) = dims;
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..ow {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * row[x + t];
                }
                tmp[y * ow + x] = acc;
            }
        }
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(y + t) * ow + x];
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

pub fn separable_filter_backward<T: Scalar>(
    grad_out: &[T],
    dims: (usize, usize, usize, usize),
    kernel: &[T],
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    let mut grad_in = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let go = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        tmp.fill(T::zero());
        for y in 0..oh {
            for x in 0..ow {
                let g = go[y * ow + x];
                for (t, &kv) in kernel.iter().enumerate() {
                    tmp[(y + t) * ow + x] += kv * g;
                }
            }
        }
        let gi = &mut grad_in[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..ow {
                let g = tmp[y * ow + x];
                for (t, &kv) in kernel.iter().enumerate() {
                    gi[y * w + x + t] += kv * g;
                }
            }
        }
    }
    grad_in
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(input: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                out[(plane * oh + y) * ow + x] =
                    (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut grad_in = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let gi = &mut grad_in[plane * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out[(plane * oh + y) * ow + x] * quarter;
                let i = 2 * y * w + 2 * x;
                gi[i] += g;
                gi[i + 1] += g;
                gi[i + w] += g;
                gi[i + w + 1] += g;
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, pad: usize, mode: PadMode) -> ConvGeom {
        ConvGeom {
            n: 1,
            cin: 1,
            h,
            w,
            cout: 1,
            k,
            stride,
            pad,
            mode,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    #[test]
    fn reflection_does_not_repeat_edge() {
        let g = geom(1, 3, 1, 1, 2, PadMode::Reflect);
        let t = g.axis_table(3, g.ow);
        // padded row of [a b c] with pad 2: c b a b c b a
        assert_eq!(t, vec![2, 1, 0, 1, 2, 1, 0]);
    }

    #[test]
    fn zero_padding_marks_outside() {
        let g = geom(1, 2, 1, 1, 1, PadMode::Zero);
        assert_eq!(g.axis_table(2, g.ow), vec![usize::MAX, 0, 1, usize::MAX]);
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let g = ConvGeom { cin: 2, ..geom(5, 4, 3, 2, 1, PadMode::Reflect) };
        let im = Im2Col::new(&g);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_pixels()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut ux = vec![0.0; y.len()];
        im.unfold(&g, &x, &mut ux);
        let mut fy = vec![0.0; x.len()];
        im.fold_add(&g, &y, &mut fy);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
