use ndarray::{Array2, Array4, Axis};

use super::{join, Conv2d, Exec, Module, Param, ParamKind};

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Array4<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Param::filled(&[ch], 1.0, ParamKind::Trainable),
            beta: Param::zeros(&[ch], ParamKind::Trainable),
            running_mean: Param::zeros(&[ch], ParamKind::Buffer),
            running_var: Param::filled(&[ch], 1.0, ParamKind::Buffer),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; inference mode uses the running estimates only.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut out = Array4::zeros(x.dim());
        let mut xhat = if train { Array4::zeros(x.dim()) } else { Array4::zeros((0, 0, 0, 0)) };
        let mut inv_stds = vec![0.0f32; c];
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let (mean, inv_std) = if train {
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mom = self.momentum as f64;
                self.running_mean.value[ch] = ((1.0 - mom) * self.running_mean.value[ch] as f64 + mom * mean) as f32;
                self.running_var.value[ch] = ((1.0 - mom) * self.running_var.value[ch] as f64 + mom * unbiased) as f32;
                (mean as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32)
            } else {
                (
                    self.running_mean.value[ch],
                    1.0 / (self.running_var.value[ch] + self.eps).sqrt(),
                )
            };
            inv_stds[ch] = inv_std;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut o = out.index_axis_mut(Axis(1), ch);
            o.zip_mut_with(&plane, |o, &v| *o = (v - mean) * inv_std * g + b);
            if train {
                xhat.index_axis_mut(Axis(1), ch)
                    .zip_mut_with(&plane, |o, &v| *o = (v - mean) * inv_std);
            }
        }
        self.cache = train.then_some((xhat, inv_stds));
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (xhat, inv_stds) = self.cache.take().expect("bn backward without training forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f32;
        let mut dx = Array4::zeros(dy.dim());
        for ch in 0..c {
            let g = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&gv, &xv) in g.iter().zip(xh.iter()) {
                sum_g += gv as f64;
                sum_gx += (gv * xv) as f64;
            }
            self.beta.grad[ch] += sum_g as f32;
            self.gamma.grad[ch] += sum_gx as f32;
            let scale = self.gamma.value[ch] * inv_stds[ch] / m;
            let (sg, sgx) = (sum_g as f32, sum_gx as f32);
            let mut d = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut d)
                .and(&g)
                .and(&xh)
                .for_each(|d, &gv, &xv| *d = scale * (m * gv - sg - xv * sgx));
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward4(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        if train {
            self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward4(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let mask = self.mask.take().expect("relu backward without training forward");
        let mut dx = dy.as_standard_layout().into_owned();
        dx.iter_mut().zip(mask).for_each(|(d, m)| {
            if !m {
                *d = 0.0
            }
        });
        dx
    }

    pub fn forward2(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        if train {
            self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward2(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let mask = self.mask.take().expect("relu backward without training forward");
        let mut dx = dy.as_standard_layout().into_owned();
        dx.iter_mut().zip(mask).for_each(|(d, m)| {
            if !m {
                *d = 0.0
            }
        });
        dx
    }
}

/// Non-overlapping `k x k` mean pooling (trailing rows/cols dropped).
#[derive(Debug, Clone)]
pub struct AvgPool {
    pub k: usize,
    in_hw: Option<(usize, usize)>,
}

impl AvgPool {
    pub fn new(k: usize) -> Self {
        Self { k, in_hw: None }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let k = self.k;
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f32;
        let mut out = Array4::zeros((n, c, ho, wo));
        for ((b, ch, oy, ox), o) in out.indexed_iter_mut() {
            let mut acc = 0.0f32;
            for i in 0..k {
                for j in 0..k {
                    acc += x[[b, ch, oy * k + i, ox * k + j]];
                }
            }
            *o = acc * norm;
        }
        if train {
            self.in_hw = Some((h, w));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (h, w) = self.in_hw.take().expect("pool backward without training forward");
        let (n, c, ho, wo) = dy.dim();
        let k = self.k;
        let norm = 1.0 / (k * k) as f32;
        let mut dx = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = dy[[b, ch, oy, ox]] * norm;
                        for i in 0..k {
                            for j in 0..k {
                                dx[[b, ch, oy * k + i, ox * k + j]] = g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 3x3 max pooling, stride 2, padding 1.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    cache: Option<((usize, usize, usize, usize), Vec<usize>)>,
}

impl MaxPool {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut arg = Vec::with_capacity(if train { n * c * ho * wo } else { 0 });
        for ((b, ch, oy, ox), o) in out.indexed_iter_mut() {
            let mut best = f32::NEG_INFINITY;
            let mut best_at = 0;
            for i in 0..3 {
                for j in 0..3 {
                    let iy = (oy * 2 + i) as isize - 1;
                    let ix = (ox * 2 + j) as isize - 1;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        let v = x[[b, ch, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            best_at = ((b * c + ch) * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
            }
            *o = best;
            if train {
                arg.push(best_at);
            }
        }
        if train {
            self.cache = Some(((n, c, h, w), arg));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (dim, arg) = self.cache.take().expect("pool backward without training forward");
        let mut dx = vec![0.0f32; dim.0 * dim.1 * dim.2 * dim.3];
        for (g, &at) in dy.iter().zip(&arg) {
            dx[at] += *g;
        }
        Array4::from_shape_vec(dim, dx).unwrap()
    }
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        let (n, c, h, w) = x.dim();
        let norm = (h * w) as f64;
        let out = Array2::from_shape_fn((n, c), |(b, ch)| {
            (x.index_axis(Axis(0), b).index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum::<f64>() / norm) as f32
        });
        if train {
            self.in_hw = Some((h, w));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.in_hw.take().expect("pool backward without training forward");
        let (n, c) = dy.dim();
        let norm = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] * norm)
    }
}

/// Fully connected layer, weight stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self {
            weight: Param::uniform_fan_in(&[out_dim, in_dim], in_dim, seed),
            bias: Param::uniform_fan_in(&[out_dim], in_dim, crate::seed::derive(seed, "bias", 0)),
            in_dim,
            out_dim,
            input: None,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f32> {
        ndarray::ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weight.value).unwrap()
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let mut y = x.dot(&self.w().t());
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&self.bias.value).for_each(|(v, b)| *v += b);
        }
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.input.take().expect("linear backward without training forward");
        let dw = dy.t().dot(&x);
        super::add_assign(&mut self.weight.grad, dw.as_standard_layout().as_slice().unwrap());
        for row in dy.rows() {
            super::add_assign(&mut self.bias.grad, &row.to_vec());
        }
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
}

/// Residual block: two 3x3 conv/BN pairs plus an identity or 1x1 projection
/// shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, seed: u64) -> Self {
        let s = |tag: &str| crate::seed::derive(seed, tag, 0);
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, s("conv1")),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, s("conv2")),
            bn2: BatchNorm2d::new(out_ch),
            shortcut: (stride != 1 || in_ch != out_ch).then(|| {
                (
                    Conv2d::new(in_ch, out_ch, 1, stride, 0, false, s("down")),
                    BatchNorm2d::new(out_ch),
                )
            }),
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let a = self.conv1.forward(x, train);
        let a = self.bn1.forward(&a, train);
        let a = self.relu1.forward4(&a, train);
        let a = self.conv2.forward(&a, train);
        let mut a = self.bn2.forward(&a, train);
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(x, train);
                a += &bn.forward(&s, train);
            }
            None => a += x,
        }
        self.relu_out.forward4(&a, train)
    }

    pub fn backward(&mut self, dy: &Array4<f32>, exec: Exec) -> Array4<f32> {
        let d = self.relu_out.backward4(dy);
        let m = self.bn2.backward(&d);
        let m = self.conv2.backward(&m, exec).unwrap();
        let m = self.relu1.backward4(&m);
        let m = self.bn1.backward(&m);
        let mut dx = self.conv1.backward(&m, exec).unwrap();
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = bn.backward(&d);
                dx += &conv.backward(&s, exec).unwrap();
            }
            None => dx += &d,
        }
        dx
    }
}

impl Module for BasicBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(&join(prefix, "down.conv"), f);
            bn.visit(&join(prefix, "down.bn"), f);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_ref(&join(prefix, "conv1"), f);
        self.bn1.visit_ref(&join(prefix, "bn1"), f);
        self.conv2.visit_ref(&join(prefix, "conv2"), f);
        self.bn2.visit_ref(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = self.shortcut.as_ref() {
            conv.visit_ref(&join(prefix, "down.conv"), f);
            bn.visit_ref(&join(prefix, "down.bn"), f);
        }
    }
}
