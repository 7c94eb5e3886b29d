//! Dense, convolutional and residual building blocks with hand-written
//! backward passes. Every `backward` accumulates into a gradient container of
//! the same type and returns the gradient with respect to the layer input.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{FeatureMap, Real};

/// Named, flat view of one parameter tensor.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Uniform traversal over parameter tensors, in a fixed order.
pub trait Parameters<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn normal_array<T: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// Fully connected layer, `y = W x + b` with `W` stored as out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn random<R: Rng>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_vec((outputs, inputs), normal_array(rng, inputs * outputs, std))
            .expect("length matches shape");
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<'_, T>, dy: ArrayView1<'_, T>, grad: &mut Linear<T>) -> Array1<T> {
        for (mut row, &d) in grad.weight.rows_mut().into_iter().zip(dy.iter()) {
            row.scaled_add(d, &x);
        }
        grad.bias += &dy;
        self.weight.t().dot(&dy)
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((join(prefix, "weight"), self.weight.as_slice_mut().expect("standard layout")));
        out.push((join(prefix, "bias"), self.bias.as_slice_mut().expect("standard layout")));
    }
}

/// Square-kernel 2-D convolution lowered to a matrix product over im2col
/// patches. The weight is stored as out_channels × (in_channels · k · k).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn random<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec((out_channels, fan_in), normal_array(rng, out_channels * fan_in, std))
            .expect("length matches shape");
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            ..*self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &FeatureMap<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (k, st, p) = (self.kernel, self.stride, self.padding);
        let ho = self.output_side(h);
        let wo = self.output_side(w);
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * st + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[oy * wo + ox] = x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, c: usize, h: usize, w: usize) -> FeatureMap<T> {
        let (k, st, p) = (self.kernel, self.stride, self.padding);
        let ho = self.output_side(h);
        let wo = self.output_side(w);
        let mut x = Array3::zeros((c, h, w));
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let src = cols.row((ch * k + ky) * k + kx);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * st + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output map and the im2col patches needed by `backward`.
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, Array2<T>) {
        let (_, h, w) = x.dim();
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = y
            .into_shape_with_order((self.out_channels(), self.output_side(h), self.output_side(w)))
            .expect("conv output size");
        (out, cols)
    }

    pub fn backward(&self, cols: &Array2<T>, input_dim: (usize, usize, usize), dy: &FeatureMap<T>, grad: &mut Conv2d<T>) -> FeatureMap<T> {
        let (c, h, w) = input_dim;
        let (co, ho, wo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, ho * wo))
            .expect("conv grad size");
        grad.weight += &dy2.dot(&cols.t());
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&dy2);
        self.col2im(&dcols, c, h, w)
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            shape: vec![self.out_channels(), self.in_channels, self.kernel, self.kernel],
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((join(prefix, "weight"), self.weight.as_slice_mut().expect("standard layout")));
        out.push((join(prefix, "bias"), self.bias.as_slice_mut().expect("standard layout")));
    }
}

fn relu<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Real>(pre: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    out
}

/// Basic residual block: `relu(conv2(relu(conv1(x))) + shortcut(x))`, with a
/// 1×1 projection shortcut whenever the stride or channel count changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

pub struct BlockCache<T> {
    input_dim: (usize, usize, usize),
    cols1: Array2<T>,
    pre1: FeatureMap<T>,
    cols2: Array2<T>,
    cols_sc: Option<Array2<T>>,
    pre_out: FeatureMap<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn random<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::random(in_channels, out_channels, 3, stride, 1.0, rng);
        // Scaled-down residual branch keeps activations bounded without normalization layers.
        let conv2 = Conv2d::random(out_channels, out_channels, 3, 1, 0.5, rng);
        let shortcut = (stride != 1 || in_channels != out_channels)
            .then(|| Conv2d::random(in_channels, out_channels, 1, stride, 1.0, rng));
        Self { conv1, conv2, shortcut }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            shortcut: self.shortcut.as_ref().map(Conv2d::zeros_like),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn output_side(&self, side: usize) -> usize {
        self.conv1.output_side(side)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, BlockCache<T>) {
        let (pre1, cols1) = self.conv1.forward(x);
        let hidden = relu(&pre1);
        let (mut pre_out, cols2) = self.conv2.forward(&hidden);
        let cols_sc = match &self.shortcut {
            Some(sc) => {
                let (proj, cols) = sc.forward(x);
                pre_out += &proj;
                Some(cols)
            }
            None => {
                pre_out += x;
                None
            }
        };
        let out = relu(&pre_out);
        let cache = BlockCache {
            input_dim: x.dim(),
            cols1,
            pre1,
            cols2,
            cols_sc,
            pre_out,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &FeatureMap<T>, grad: &mut ResidualBlock<T>) -> FeatureMap<T> {
        let d_pre_out = relu_backward(&cache.pre_out, dy);
        let d_hidden = self.conv2.backward(&cache.cols2, cache.pre1.dim(), &d_pre_out, &mut grad.conv2);
        let d_pre1 = relu_backward(&cache.pre1, &d_hidden);
        let mut dx = self.conv1.backward(&cache.cols1, cache.input_dim, &d_pre1, &mut grad.conv1);
        match (&self.shortcut, &cache.cols_sc, grad.shortcut.as_mut()) {
            (Some(sc), Some(cols), Some(g)) => dx += &sc.backward(cols, cache.input_dim, &d_pre_out, g),
            _ => dx += &d_pre_out,
        }
        dx
    }
}

impl<T: Real> Parameters<T> for ResidualBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        if let Some(sc) = &self.shortcut {
            sc.collect_params(&join(prefix, "shortcut"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
        if let Some(sc) = &mut self.shortcut {
            sc.collect_params_mut(&join(prefix, "shortcut"), out);
        }
    }
}

/// Naive direct convolution, used only to cross-check the im2col path.
#[cfg(test)]
pub(crate) fn direct_conv<T: Real>(conv: &Conv2d<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = x.dim();
    let k = conv.kernel;
    let ho = conv.output_side(h);
    let wo = conv.output_side(w);
    let mut out = Array3::zeros((conv.out_channels(), ho, wo));
    let padded = {
        let p = conv.padding;
        let mut z = Array3::zeros((c, h + 2 * p, w + 2 * p));
        z.slice_mut(ndarray::s![.., p..p + h, p..p + w]).assign(x);
        z
    };
    for o in 0..conv.out_channels() {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = conv.bias[o];
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += conv.weight[[o, (ch * k + ky) * k + kx]]
                                * padded[[ch, oy * conv.stride + ky, ox * conv.stride + kx]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    out
}
