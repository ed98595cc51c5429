use ndarray::{Array2, Array4, ArrayView2};

use super::{join, Exec, Module, Param, ParamKind};
use crate::par;

/// Samples whose per-sample gradients are materialized at once.
const GRAD_CHUNK: usize = 8;

/// 2-D convolution over square kernels, lowered to im2col + matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// The first layer of a network never needs an input gradient.
    pub needs_input_grad: bool,
    input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool, seed: u64) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::kaiming(&[out_ch, in_ch, kernel, kernel], fan_in, seed),
            bias: bias.then(|| Param::zeros(&[out_ch], ParamKind::Trainable)),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            needs_input_grad: true,
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.out_ch, self.in_ch * self.kernel * self.kernel), &self.weight.value)
            .expect("weight shape")
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let src = x.as_slice().expect("standard layout");
        let per = c * h * w;
        let wm = self.weight_matrix();
        let bias = self.bias.as_ref().map(|b| b.value.as_slice());
        let outs = par::map_range(n, |i| {
            let cols = im2col(&src[i * per..(i + 1) * per], c, h, w, self.kernel, self.stride, self.pad, ho, wo);
            let mut y = wm.dot(&cols);
            if let Some(b) = bias {
                for (mut row, &bv) in y.rows_mut().into_iter().zip(b) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            y.into_raw_vec_and_offset().0
        });
        let out = Array4::from_shape_vec((n, self.out_ch, ho, wo), outs.concat()).expect("conv output");
        self.input = train.then_some(x);
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `needs_input_grad` is set.
    pub fn backward(&mut self, dy: &Array4<f32>, exec: Exec) -> Option<Array4<f32>> {
        let x = self.input.take().expect("conv backward without training forward");
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        let src = x.as_slice().unwrap();
        let per_in = c * h * w;
        let per_out = self.out_ch * ho * wo;
        let ckk = c * self.kernel * self.kernel;
        let wm = self.weight_matrix();
        let with_bias = self.bias.is_some();
        let need_dx = self.needs_input_grad;

        let mut dx_all = if need_dx { vec![0.0f32; n * per_in] } else { Vec::new() };
        let mut grad = vec![0.0f32; self.weight.len() + if with_bias { self.out_ch } else { 0 }];
        let mut start = 0;
        while start < n {
            let end = (start + GRAD_CHUNK).min(n);
            let parts = par::map_range(end - start, |j| {
                let i = start + j;
                let cols = im2col(&src[i * per_in..(i + 1) * per_in], c, h, w, self.kernel, self.stride, self.pad, ho, wo);
                let g = ArrayView2::from_shape((self.out_ch, ho * wo), &dys[i * per_out..(i + 1) * per_out]).unwrap();
                let dw = g.dot(&cols.t());
                let mut pg = dw.into_raw_vec_and_offset().0;
                if with_bias {
                    pg.extend(g.rows().into_iter().map(|r| r.sum()));
                }
                let dx = need_dx.then(|| {
                    let dcols = wm.t().dot(&g);
                    col2im(&dcols, c, h, w, self.kernel, self.stride, self.pad, ho, wo)
                });
                (pg, dx)
            });
            let mut grads = Vec::with_capacity(parts.len());
            for (j, (pg, dx)) in parts.into_iter().enumerate() {
                grads.push(pg);
                if let Some(dx) = dx {
                    let i = start + j;
                    dx_all[i * per_in..(i + 1) * per_in].copy_from_slice(&dx);
                }
            }
            let chunk = exec.reduce(grads);
            super::add_assign(&mut grad, &chunk);
            start = end;
        }
        let wl = self.weight.len();
        super::add_assign(&mut self.weight.grad, &grad[..wl]);
        if let Some(b) = self.bias.as_mut() {
            super::add_assign(&mut b.grad, &grad[wl..]);
        }
        debug_assert_eq!(ckk * self.out_ch, wl);
        need_dx.then(|| Array4::from_shape_vec((n, c, h, w), dx_all).unwrap())
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = self.bias.as_ref() {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let mut cols = vec![0.0f32; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ho * wo), cols).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &Array2<f32>, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut x = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.out_hw(h, w);
        let k = conv.kernel;
        let mut y = Array4::zeros((n, conv.out_ch, ho, wo));
        for b in 0..n {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[o]);
                        for ch in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[((o * c + ch) * k + ki) * k + kj]
                                            * x[[b, ch, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn input(n: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, c, h, w), |(a, b, i, j)| {
            ((a * 7 + b * 13 + i * 3 + j * 5) % 11) as f32 * 0.1 - 0.5
        })
    }

    #[test]
    fn forward_matches_direct_loops() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (7, 2, 3)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, true, 9);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
            let x = input(2, 2, 9, 8);
            let y = conv.forward(&x, false);
            let expect = naive(&conv, &x);
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut conv = Conv2d::new(2, 2, 3, 2, 1, true, 3);
        let x = input(3, 2, 6, 5);
        // Loss = sum(y * r) for a fixed r.
        let y = conv.forward(&x, true);
        let r = Array4::from_shape_fn(y.dim(), |(a, b, i, j)| ((a + 2 * b + 3 * i + j) % 5) as f32 - 2.0);
        let dx = conv.backward(&r, Exec::default()).unwrap();
        let loss = |conv: &mut Conv2d, x: &Array4<f32>| -> f64 {
            conv.forward(x, false).iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, 5, 17, 35] {
            let mut c2 = conv.clone();
            c2.weight.value[idx] += eps;
            let up = loss(&mut c2, &x);
            c2.weight.value[idx] -= 2.0 * eps;
            let down = loss(&mut c2, &x);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - conv.weight.grad[idx] as f64).abs() < 1e-2, "w[{idx}] {fd} vs {}", conv.weight.grad[idx]);
        }
        for (i, ch, yy, xx) in [(0, 0, 0, 0), (1, 1, 3, 2), (2, 0, 5, 4)] {
            let mut xp = x.clone();
            xp[[i, ch, yy, xx]] += eps;
            let up = loss(&mut conv.clone(), &xp);
            xp[[i, ch, yy, xx]] -= 2.0 * eps;
            let down = loss(&mut conv.clone(), &xp);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - dx[[i, ch, yy, xx]] as f64).abs() < 1e-2);
        }
        let bsum: f32 = r.index_axis(ndarray::Axis(1), 0).sum();
        assert!((conv.bias.as_ref().unwrap().grad[0] - bsum).abs() < 1e-4);
    }
}
