//! Layer vocabulary of the engine. Every layer caches what its backward pass
//! needs during a training-mode forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::real::{gemm, Op};
use super::{Real, Tensor};

/// A trainable parameter or a non-trainable buffer (batchnorm running statistics).
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
    /// Max-norm bound applied per leading-axis slice after each optimizer step.
    pub max_norm: Option<f64>,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
            max_norm: None,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }

    fn glorot(name: String, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.gen_range(-limit..limit))).collect();
        Param::new(name, Tensor::from_vec(shape, data).expect("glorot shape"))
    }
}

/// Padding mode for convolutions and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Same,
    Valid,
}

/// Zero padding split for "same": extra sample goes to the bottom/right.
fn same_split(total: usize) -> (usize, usize) {
    let before = total / 2;
    (before, total - before)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Square,
    /// Natural log with the input clamped below at `1e-7`.
    Log,
    Softmax,
}

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    /// Concatenate rank-4 branch outputs along the feature-map axis.
    Channels,
    /// Concatenate rank-2 branch outputs along the feature axis.
    Features,
}

/// Which grouped convolution a [`Conv2d`] realizes; only affects naming and descriptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub padding: PadMode,
    pub role: ConvRole,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    input: Option<Tensor<F>>,
}

impl<F: Real> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
        padding: PadMode,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0);
        assert!(kernel.0 >= 1 && kernel.1 >= 1, "kernel extents must be >= 1");
        let cin_g = in_channels / groups;
        let cout_g = out_channels / groups;
        let rf = kernel.0 * kernel.1;
        let weight = Param::glorot(
            format!("{name}.weight"),
            &[out_channels, cin_g, kernel.0, kernel.1],
            cin_g * rf,
            cout_g * rf,
            rng,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        let role = if groups == in_channels && groups > 1 {
            ConvRole::Depthwise
        } else if rf == 1 {
            ConvRole::Pointwise
        } else {
            ConvRole::Standard
        };
        Conv2d {
            in_channels,
            out_channels,
            groups,
            kernel,
            padding,
            role,
            weight,
            bias,
            input: None,
        }
    }

    fn pads(&self) -> [usize; 4] {
        match self.padding {
            PadMode::Valid => [0; 4],
            PadMode::Same => {
                let (t, b) = same_split(self.kernel.0 - 1);
                let (l, r) = same_split(self.kernel.1 - 1);
                [t, b, l, r]
            }
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let [t, b, l, r] = self.pads();
        let hp = h + t + b;
        let wp = w + l + r;
        if hp < self.kernel.0 || wp < self.kernel.1 {
            return None;
        }
        Some((hp - self.kernel.0 + 1, wp - self.kernel.1 + 1))
    }

    fn direct_cols(&self) -> bool {
        self.kernel == (1, 1)
    }

    fn im2col(&self, x: &[F], h: usize, w: usize, c0: usize, ho: usize, wo: usize, col: &mut [F]) {
        let (kh, kw) = self.kernel;
        let [pt, _, pl, _] = self.pads();
        let cin_g = self.in_channels / self.groups;
        let p = ho * wo;
        for c in 0..cin_g {
            let plane = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * p;
                    let lo = pl.saturating_sub(j).min(wo);
                    let hi = (w + pl).saturating_sub(j).min(wo).max(lo);
                    for oh in 0..ho {
                        let dst = &mut col[row + oh * wo..row + (oh + 1) * wo];
                        let ih = (oh + i) as isize - pt as isize;
                        if ih < 0 || ih >= h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        dst[..lo].fill(F::zero());
                        dst[hi..].fill(F::zero());
                        let s0 = lo + j - pl;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], h: usize, w: usize, c0: usize, ho: usize, wo: usize, dx: &mut [F]) {
        let (kh, kw) = self.kernel;
        let [pt, _, pl, _] = self.pads();
        let cin_g = self.in_channels / self.groups;
        let p = ho * wo;
        for c in 0..cin_g {
            let plane = &mut dx[(c0 + c) * h * w..(c0 + c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * p;
                    let lo = pl.saturating_sub(j).min(wo);
                    let hi = (w + pl).saturating_sub(j).min(wo).max(lo);
                    for oh in 0..ho {
                        let ih = (oh + i) as isize - pt as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &col[row + oh * wo + lo..row + oh * wo + hi];
                        let s0 = lo + j - pl;
                        let dst = &mut plane[ih as usize * w + s0..ih as usize * w + s0 + (hi - lo)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    fn forward(&mut self, x: Tensor<F>, training: bool) -> Tensor<F> {
        let (n, _, h, w) = x.dims4().expect("checked rank");
        let (ho, wo) = self.out_hw(h, w).expect("checked extents");
        let p = ho * wo;
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let k = cin_g * self.kernel.0 * self.kernel.1;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut col = if self.direct_cols() { Vec::new() } else { vec![F::zero(); k * p] };
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * p;
        let wdata = self.weight.value.data();
        for s in 0..n {
            let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
            let os = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
            for g in 0..self.groups {
                let cols: &[F] = if self.direct_cols() {
                    &xs[g * cin_g * p..(g + 1) * cin_g * p]
                } else {
                    self.im2col(xs, h, w, g * cin_g, ho, wo, &mut col);
                    &col
                };
                let wg = &wdata[g * cout_g * k..(g + 1) * cout_g * k];
                let og = &mut os[g * cout_g * p..(g + 1) * cout_g * p];
                gemm(cout_g, k, p, F::one(), wg, Op::N, cols, Op::N, F::zero(), og);
            }
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.data().iter().enumerate() {
                    os[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        if training {
            self.input = Some(x);
        }
        out
    }

    fn backward(&mut self, dy: Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let x = self.input.take().expect("forward cached input");
        let (n, _, h, w) = x.dims4().expect("rank 4");
        let (ho, wo) = self.out_hw(h, w).expect("extents");
        let p = ho * wo;
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let k = cin_g * self.kernel.0 * self.kernel.1;
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * p;
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut col = if self.direct_cols() { Vec::new() } else { vec![F::zero(); k * p] };
        let mut dcol = if self.direct_cols() { Vec::new() } else { vec![F::zero(); k * p] };
        for s in 0..n {
            let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
            let dys = &dy.data()[s * out_stride..(s + 1) * out_stride];
            if let Some(b) = &mut self.bias {
                for (c, gb) in b.grad.data_mut().iter_mut().enumerate() {
                    *gb += dys[c * p..(c + 1) * p].iter().copied().sum::<F>();
                }
            }
            for g in 0..self.groups {
                let dyg = &dys[g * cout_g * p..(g + 1) * cout_g * p];
                {
                    let cols: &[F] = if self.direct_cols() {
                        &xs[g * cin_g * p..(g + 1) * cin_g * p]
                    } else {
                        self.im2col(xs, h, w, g * cin_g, ho, wo, &mut col);
                        &col
                    };
                    let dwg = &mut self.weight.grad.data_mut()[g * cout_g * k..(g + 1) * cout_g * k];
                    gemm(cout_g, p, k, F::one(), dyg, Op::N, cols, Op::T, F::one(), dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &self.weight.value.data()[g * cout_g * k..(g + 1) * cout_g * k];
                    let dxs = &mut dx.data_mut()[s * in_stride..(s + 1) * in_stride];
                    if self.direct_cols() {
                        let dst = &mut dxs[g * cin_g * p..(g + 1) * cin_g * p];
                        gemm(k, cout_g, p, F::one(), wg, Op::T, dyg, Op::N, F::zero(), dst);
                    } else {
                        gemm(k, cout_g, p, F::one(), wg, Op::T, dyg, Op::N, F::zero(), &mut dcol);
                        self.col2im(&dcol, h, w, g * cin_g, ho, wo, dxs);
                    }
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    cache: Option<(Tensor<F>, Vec<F>)>,
}

impl<F: Real> BatchNorm<F> {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPSILON: f64 = 1e-3;

    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: Self::MOMENTUM,
            epsilon: Self::EPSILON,
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[channels], F::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::filled(&[channels], F::one())),
            cache: None,
        }
    }

    fn forward(&mut self, mut x: Tensor<F>, training: bool) -> Tensor<F> {
        let (n, c, h, w) = x.dims4().expect("rank 4");
        let p = h * w;
        let m = F::of((n * p) as f64);
        let eps = F::of(self.epsilon);
        let mut inv_stds = vec![F::zero(); c];
        for ch in 0..c {
            let (mean, var) = if training {
                let mut sum = F::zero();
                for s in 0..n {
                    let base = (s * c + ch) * p;
                    sum += x.data()[base..base + p].iter().copied().sum::<F>();
                }
                let mean = sum / m;
                let mut sq = F::zero();
                for s in 0..n {
                    let base = (s * c + ch) * p;
                    sq += x.data()[base..base + p].iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
                }
                let var = sq / m;
                let mom = F::of(self.momentum);
                let rm = &mut self.running_mean.value.data_mut()[ch];
                *rm = mom * *rm + (F::one() - mom) * mean;
                let rv = &mut self.running_var.value.data_mut()[ch];
                *rv = mom * *rv + (F::one() - mom) * var;
                (mean, var)
            } else {
                (self.running_mean.value.data()[ch], self.running_var.value.data()[ch])
            };
            let inv_std = F::one() / (var + eps).sqrt();
            inv_stds[ch] = inv_std;
            for s in 0..n {
                let base = (s * c + ch) * p;
                for v in &mut x.data_mut()[base..base + p] {
                    *v = (*v - mean) * inv_std;
                }
            }
        }
        let xhat = training.then(|| x.clone());
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for s in 0..n {
                let base = (s * c + ch) * p;
                for v in &mut x.data_mut()[base..base + p] {
                    *v = g * *v + b;
                }
            }
        }
        if let Some(xhat) = xhat {
            self.cache = Some((xhat, inv_stds));
        }
        x
    }

    fn backward(&mut self, mut dy: Tensor<F>) -> Tensor<F> {
        let (xhat, inv_stds) = self.cache.take().expect("forward cached statistics");
        let (n, c, h, w) = dy.dims4().expect("rank 4");
        let p = h * w;
        let m = F::of((n * p) as f64);
        for ch in 0..c {
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            for s in 0..n {
                let base = (s * c + ch) * p;
                for (g, xh) in dy.data()[base..base + p].iter().zip(&xhat.data()[base..base + p]) {
                    dgamma += *g * *xh;
                    dbeta += *g;
                }
            }
            self.gamma.grad.data_mut()[ch] += dgamma;
            self.beta.grad.data_mut()[ch] += dbeta;
            let scale = self.gamma.value.data()[ch] * inv_stds[ch] / m;
            for s in 0..n {
                let base = (s * c + ch) * p;
                let xh = &xhat.data()[base..base + p];
                for (g, x) in dy.data_mut()[base..base + p].iter_mut().zip(xh) {
                    *g = scale * (m * *g - dbeta - *x * dgamma);
                }
            }
        }
        dy
    }
}

#[derive(Clone, Debug)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: PadMode,
    argmax: Option<Vec<usize>>,
    in_shape: Option<Vec<usize>>,
}

impl Pool2d {
    pub fn new(kind: PoolKind, kernel: (usize, usize), stride: (usize, usize), padding: PadMode) -> Self {
        assert!(kernel.0 >= 1 && kernel.1 >= 1 && stride.0 >= 1 && stride.1 >= 1);
        Pool2d {
            kind,
            kernel,
            stride,
            padding,
            argmax: None,
            in_shape: None,
        }
    }

    /// Output extent and leading pad along one axis.
    fn axis(&self, len: usize, k: usize, s: usize) -> Option<(usize, usize)> {
        match self.padding {
            PadMode::Valid => (len >= k).then(|| ((len - k) / s + 1, 0)),
            PadMode::Same => {
                let out = len.div_ceil(s);
                let total = ((out - 1) * s + k).saturating_sub(len);
                Some((out, same_split(total).0))
            }
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<((usize, usize), (usize, usize))> {
        Some((self.axis(h, self.kernel.0, self.stride.0)?, self.axis(w, self.kernel.1, self.stride.1)?))
    }

    /// Input index range (clipped to the valid region) covered by output position `o`.
    fn span(o: usize, s: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
        let start = (o * s) as isize - pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + k as isize).max(0) as usize).min(len);
        (lo, hi)
    }

    fn forward<F: Real>(&mut self, x: &Tensor<F>, training: bool) -> Tensor<F> {
        let (n, c, h, w) = x.dims4().expect("rank 4");
        let ((ho, pt), (wo, pl)) = self.out_hw(h, w).expect("checked extents");
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = if training && self.kind == PoolKind::Max {
            vec![0usize; n * c * ho * wo]
        } else {
            Vec::new()
        };
        for plane in 0..n * c {
            let xin = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                let (h0, h1) = Self::span(oh, self.stride.0, self.kernel.0, pt, h);
                for ow in 0..wo {
                    let (w0, w1) = Self::span(ow, self.stride.1, self.kernel.1, pl, w);
                    let o = (plane * ho + oh) * wo + ow;
                    match self.kind {
                        PoolKind::Avg => {
                            let mut acc = F::zero();
                            for ih in h0..h1 {
                                acc += xin[ih * w + w0..ih * w + w1].iter().copied().sum::<F>();
                            }
                            let count = ((h1 - h0) * (w1 - w0)).max(1);
                            out.data_mut()[o] = acc / F::of(count as f64);
                        }
                        PoolKind::Max => {
                            let mut best = F::neg_infinity();
                            let mut at = h0 * w + w0;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    let v = xin[ih * w + iw];
                                    if v > best {
                                        best = v;
                                        at = ih * w + iw;
                                    }
                                }
                            }
                            out.data_mut()[o] = best;
                            if !arg.is_empty() {
                                arg[o] = at;
                            }
                        }
                    }
                }
            }
        }
        if training {
            self.in_shape = Some(x.shape().to_vec());
            self.argmax = (self.kind == PoolKind::Max).then_some(arg);
        }
        out
    }

    fn backward<F: Real>(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let shape = self.in_shape.take().expect("forward cached shape");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ((ho, pt), (wo, pl)) = self.out_hw(h, w).expect("extents");
        let mut dx = Tensor::zeros(&shape);
        let arg = self.argmax.take();
        for plane in 0..n * c {
            let dxp = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                let (h0, h1) = Self::span(oh, self.stride.0, self.kernel.0, pt, h);
                for ow in 0..wo {
                    let o = (plane * ho + oh) * wo + ow;
                    let g = dy.data()[o];
                    match &arg {
                        Some(arg) => dxp[arg[o]] += g,
                        None => {
                            let (w0, w1) = Self::span(ow, self.stride.1, self.kernel.1, pl, w);
                            let count = ((h1 - h0) * (w1 - w0)).max(1);
                            let share = g / F::of(count as f64);
                            for ih in h0..h1 {
                                dxp[ih * w + w0..ih * w + w1].iter_mut().for_each(|v| *v += share);
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Dense<F> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    input: Option<Tensor<F>>,
}

impl<F: Real> Dense<F> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Param::glorot(
                format!("{name}.weight"),
                &[out_features, in_features],
                in_features,
                out_features,
                rng,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            input: None,
        }
    }

    fn forward(&mut self, x: Tensor<F>, training: bool) -> Tensor<F> {
        let n = x.shape()[0];
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for s in 0..n {
            out.data_mut()[s * self.out_features..(s + 1) * self.out_features]
                .copy_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            F::one(),
            x.data(),
            Op::N,
            self.weight.value.data(),
            Op::T,
            F::one(),
            out.data_mut(),
        );
        if training {
            self.input = Some(x);
        }
        out
    }

    fn backward(&mut self, dy: Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let x = self.input.take().expect("forward cached input");
        let n = x.shape()[0];
        for s in 0..n {
            for (gb, g) in self
                .bias
                .grad
                .data_mut()
                .iter_mut()
                .zip(&dy.data()[s * self.out_features..(s + 1) * self.out_features])
            {
                *gb += *g;
            }
        }
        gemm(
            self.out_features,
            n,
            self.in_features,
            F::one(),
            dy.data(),
            Op::T,
            x.data(),
            Op::N,
            F::one(),
            self.weight.grad.data_mut(),
        );
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(
                n,
                self.out_features,
                self.in_features,
                F::one(),
                dy.data(),
                Op::N,
                self.weight.value.data(),
                Op::N,
                F::zero(),
                dx.data_mut(),
            );
            dx
        })
    }
}

/// A node of the graph: one layer of the closed vocabulary.
#[derive(Clone, Debug)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    /// Depthwise convolution followed by a pointwise convolution.
    Separable(Conv2d<F>, Conv2d<F>),
    BatchNorm(BatchNorm<F>),
    Pool(Pool2d),
    Act(Activation, Option<Tensor<F>>),
    Dropout { rate: f64, mask: Option<Vec<F>> },
    Flatten(Option<Vec<usize>>),
    Dense(Dense<F>),
    Branches {
        branches: Vec<Vec<Node<F>>>,
        merge: Merge,
        widths: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct Node<F> {
    pub name: String,
    pub layer: Layer<F>,
}

/// Shape error raised by [`Layer::output_shape`], naming what the layer expected.
#[derive(Debug)]
pub(crate) struct ShapeErr {
    pub layer: String,
    pub expected: String,
    pub found: Vec<usize>,
}

pub(crate) struct Ctx<'a> {
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Real> Layer<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(c) => match c.role {
                ConvRole::Standard => "conv2d",
                ConvRole::Depthwise => "depthwise-conv2d",
                ConvRole::Pointwise => "pointwise-conv2d",
            },
            Layer::Separable(..) => "separable-conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Pool(p) => match p.kind {
                PoolKind::Avg => "avg-pool",
                PoolKind::Max => "max-pool",
            },
            Layer::Act(a, _) => match a {
                Activation::Elu => "elu",
                Activation::Square => "square",
                Activation::Log => "log",
                Activation::Softmax => "softmax",
            },
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Branches { .. } => "concat",
        }
    }

    pub(crate) fn output_shape(&self, name: &str, input: &[usize]) -> Result<Vec<usize>, ShapeErr> {
        let err = |expected: String| ShapeErr {
            layer: name.to_string(),
            expected,
            found: input.to_vec(),
        };
        let conv_out = |c: &Conv2d<F>, input: &[usize]| -> Result<Vec<usize>, ShapeErr> {
            match *input {
                [n, ch, h, w] if ch == c.in_channels => match c.out_hw(h, w) {
                    Some((ho, wo)) => Ok(vec![n, c.out_channels, ho, wo]),
                    None => Err(err(format!(
                        "height >= {} and width >= {} for kernel {:?}",
                        c.kernel.0, c.kernel.1, c.kernel
                    ))),
                },
                _ => Err(err(format!("(batch, {}, height, width)", c.in_channels))),
            }
        };
        match self {
            Layer::Conv(c) => conv_out(c, input),
            Layer::Separable(dw, pw) => {
                let mid = conv_out(dw, input)?;
                conv_out(pw, &mid)
            }
            Layer::BatchNorm(b) => match *input {
                [_, ch, _, _] if ch == b.channels => Ok(input.to_vec()),
                _ => Err(err(format!("(batch, {}, height, width)", b.channels))),
            },
            Layer::Pool(p) => match *input {
                [n, c, h, w] => match p.out_hw(h, w) {
                    Some(((ho, _), (wo, _))) => Ok(vec![n, c, ho, wo]),
                    None => Err(err(format!("extents >= pool kernel {:?}", p.kernel))),
                },
                _ => Err(err("rank-4 input".into())),
            },
            Layer::Act(Activation::Softmax, _) => match *input {
                [_, k] if k >= 1 => Ok(input.to_vec()),
                _ => Err(err("(batch, classes)".into())),
            },
            Layer::Act(..) | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::Flatten(_) => {
                if input.len() < 2 {
                    return Err(err("rank >= 2".into()));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Dense(d) => match *input {
                [n, f] if f == d.in_features => Ok(vec![n, d.out_features]),
                _ => Err(err(format!("(batch, {})", d.in_features))),
            },
            Layer::Branches { branches, merge, .. } => {
                let mut outs = Vec::with_capacity(branches.len());
                for b in branches {
                    let mut s = input.to_vec();
                    for node in b {
                        s = node.layer.output_shape(&node.name, &s)?;
                    }
                    outs.push(s);
                }
                let first = outs[0].clone();
                match merge {
                    Merge::Channels => {
                        if outs.iter().any(|o| o.len() != 4 || o[0] != first[0] || o[2..] != first[2..]) {
                            return Err(err("branch outputs with equal spatial extents".into()));
                        }
                        Ok(vec![first[0], outs.iter().map(|o| o[1]).sum(), first[2], first[3]])
                    }
                    Merge::Features => {
                        if outs.iter().any(|o| o.len() != 2) {
                            return Err(err("rank-2 branch outputs".into()));
                        }
                        Ok(vec![first[0], outs.iter().map(|o| o[1]).sum()])
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&mut self, x: Tensor<F>, ctx: &mut Ctx<'_>) -> Tensor<F> {
        let training = ctx.training;
        match self {
            Layer::Conv(c) => c.forward(x, training),
            Layer::Separable(dw, pw) => {
                let mid = dw.forward(x, training);
                pw.forward(mid, training)
            }
            Layer::BatchNorm(b) => b.forward(x, training),
            Layer::Pool(p) => p.forward(&x, training),
            Layer::Act(kind, cache) => {
                let out = activate(*kind, &x);
                if training {
                    *cache = Some(match kind {
                        Activation::Elu | Activation::Softmax => out.clone(),
                        Activation::Square | Activation::Log => x,
                    });
                }
                out
            }
            Layer::Dropout { rate, mask } => {
                if !training || *rate == 0.0 {
                    return x;
                }
                let keep = 1.0 - *rate;
                let scale = F::of(1.0 / keep);
                let m: Vec<F> = (0..x.len())
                    .map(|_| if ctx.rng.gen::<f64>() < keep { scale } else { F::zero() })
                    .collect();
                let mut out = x;
                out.data_mut().iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
                *mask = Some(m);
                out
            }
            Layer::Flatten(cache) => {
                let shape = x.shape().to_vec();
                let flat = [shape[0], shape[1..].iter().product()];
                if training {
                    *cache = Some(shape);
                }
                x.reshape(&flat).expect("flatten preserves size")
            }
            Layer::Dense(d) => d.forward(x, training),
            Layer::Branches {
                branches,
                merge,
                widths,
            } => {
                let outs: Vec<Tensor<F>> = branches
                    .iter_mut()
                    .map(|b| {
                        let mut t = x.clone();
                        for node in b.iter_mut() {
                            t = node.layer.forward(t, ctx);
                        }
                        t
                    })
                    .collect();
                let (merged, w) = concat(&outs, *merge);
                *widths = w;
                merged
            }
        }
    }

    pub(crate) fn backward(&mut self, dy: Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        match self {
            Layer::Conv(c) => c.backward(dy, need_dx),
            Layer::Separable(dw, pw) => {
                let mid = pw.backward(dy, true).expect("pointwise input gradient");
                dw.backward(mid, need_dx)
            }
            Layer::BatchNorm(b) => Some(b.backward(dy)),
            Layer::Pool(p) => Some(p.backward(&dy)),
            Layer::Act(kind, cache) => {
                let c = cache.take().expect("forward cached activation");
                Some(activate_backward(*kind, &c, dy))
            }
            Layer::Dropout { mask, .. } => {
                let mut dy = dy;
                if let Some(m) = mask.take() {
                    dy.data_mut().iter_mut().zip(&m).for_each(|(g, k)| *g *= *k);
                }
                Some(dy)
            }
            Layer::Flatten(cache) => {
                let shape = cache.take().expect("forward cached shape");
                Some(dy.reshape(&shape).expect("unflatten"))
            }
            Layer::Dense(d) => d.backward(dy, need_dx),
            Layer::Branches {
                branches,
                merge,
                widths,
            } => {
                let parts = split(&dy, *merge, widths);
                let mut acc: Option<Tensor<F>> = None;
                for (b, part) in branches.iter_mut().zip(parts) {
                    let mut g = part;
                    let mut dx_here = true;
                    for (i, node) in b.iter_mut().enumerate().rev() {
                        let want = need_dx || i > 0;
                        match node.layer.backward(g, want) {
                            Some(next) => g = next,
                            None => {
                                dx_here = false;
                                g = Tensor::zeros(&[0]);
                            }
                        }
                    }
                    if !need_dx || !dx_here {
                        continue;
                    }
                    match &mut acc {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                        None => acc = Some(g),
                    }
                }
                acc
            }
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        match self {
            Layer::Conv(c) => {
                f(&c.weight);
                if let Some(b) = &c.bias {
                    f(b);
                }
            }
            Layer::Separable(dw, pw) => {
                for c in [dw, pw] {
                    f(&c.weight);
                    if let Some(b) = &c.bias {
                        f(b);
                    }
                }
            }
            Layer::BatchNorm(b) => {
                f(&b.gamma);
                f(&b.beta);
                f(&b.running_mean);
                f(&b.running_var);
            }
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Branches { branches, .. } => {
                for node in branches.iter().flatten() {
                    node.layer.visit(f);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            Layer::Separable(dw, pw) => {
                f(&mut dw.weight);
                if let Some(b) = &mut dw.bias {
                    f(b);
                }
                f(&mut pw.weight);
                if let Some(b) = &mut pw.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
                f(&mut b.running_mean);
                f(&mut b.running_var);
            }
            Layer::Dense(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::Branches { branches, .. } => {
                for node in branches.iter_mut().flatten() {
                    node.layer.visit_mut(f);
                }
            }
            _ => {}
        }
    }
}

fn activate<F: Real>(kind: Activation, x: &Tensor<F>) -> Tensor<F> {
    match kind {
        Activation::Elu => x.map(|v| if v > F::zero() { v } else { v.exp() - F::one() }),
        Activation::Square => x.map(|v| v * v),
        Activation::Log => {
            let lo = F::of(LOG_CLAMP);
            x.map(|v| v.max(lo).ln())
        }
        Activation::Softmax => {
            let k = x.shape()[1];
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(k) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            out
        }
    }
}

fn activate_backward<F: Real>(kind: Activation, cache: &Tensor<F>, mut dy: Tensor<F>) -> Tensor<F> {
    match kind {
        Activation::Elu => {
            for (g, &y) in dy.data_mut().iter_mut().zip(cache.data()) {
                if y <= F::zero() {
                    *g *= y + F::one();
                }
            }
        }
        Activation::Square => {
            let two = F::of(2.0);
            for (g, &x) in dy.data_mut().iter_mut().zip(cache.data()) {
                *g *= two * x;
            }
        }
        Activation::Log => {
            let lo = F::of(LOG_CLAMP);
            for (g, &x) in dy.data_mut().iter_mut().zip(cache.data()) {
                *g = if x > lo { *g / x } else { F::zero() };
            }
        }
        Activation::Softmax => {
            let k = cache.shape()[1];
            for (grow, yrow) in dy.data_mut().chunks_mut(k).zip(cache.data().chunks(k)) {
                let dot: F = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                for (g, y) in grow.iter_mut().zip(yrow) {
                    *g = *y * (*g - dot);
                }
            }
        }
    }
    dy
}

fn concat<F: Real>(outs: &[Tensor<F>], merge: Merge) -> (Tensor<F>, Vec<usize>) {
    let n = outs[0].shape()[0];
    let widths: Vec<usize> = outs.iter().map(|o| o.len() / n).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for s in 0..n {
        for (o, &w) in outs.iter().zip(&widths) {
            data.extend_from_slice(&o.data()[s * w..(s + 1) * w]);
        }
    }
    let shape = match merge {
        Merge::Channels => {
            let (_, _, h, w) = outs[0].dims4().expect("rank 4");
            vec![n, total / (h * w), h, w]
        }
        Merge::Features => vec![n, total],
    };
    let channel_widths = match merge {
        Merge::Channels => outs.iter().map(|o| o.shape()[1]).collect(),
        Merge::Features => widths,
    };
    (Tensor::from_vec(&shape, data).expect("concat shape"), channel_widths)
}

fn split<F: Real>(dy: &Tensor<F>, merge: Merge, widths: &[usize]) -> Vec<Tensor<F>> {
    let n = dy.shape()[0];
    let inner: usize = match merge {
        Merge::Channels => dy.shape()[2] * dy.shape()[3],
        Merge::Features => 1,
    };
    let total: usize = widths.iter().sum::<usize>() * inner;
    let mut parts: Vec<Vec<F>> = widths.iter().map(|w| Vec::with_capacity(n * w * inner)).collect();
    for s in 0..n {
        let mut off = s * total;
        for (p, &w) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&dy.data()[off..off + w * inner]);
            off += w * inner;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, &w)| {
            let shape = match merge {
                Merge::Channels => vec![n, w, dy.shape()[2], dy.shape()[3]],
                Merge::Features => vec![n, w],
            };
            Tensor::from_vec(&shape, p).expect("split shape")
        })
        .collect()
}
