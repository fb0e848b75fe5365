//! Minimal layers with hand-written backward passes.
//!
//! All parameters of a model live in one flat `Vec<f64>`; a [`ParamLayout`]
//! names the blocks and their offsets. Layers only store offsets, read their
//! weights from the flat slice in `forward`, and accumulate into a flat
//! gradient slice of the same layout in `backward`. Sequences are `[T × C]`
//! arrays (time-major rows).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total();
        self.blocks.push(ParamBlock { name, shape, offset });
        offset
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Collects the layout and initial values while a model is being built.
pub struct ParamBuilder<'r, R: Rng> {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { layout: ParamLayout::default(), values: Vec::new(), rng }
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.layout.push(name.into(), shape);
        for _ in 0..len {
            let v: f64 = self.rng.sample(StandardNormal);
            self.values.push(std * v);
        }
        offset
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.layout.push(name.into(), shape);
        self.values.extend(std::iter::repeat(value).take(len));
        offset
    }

    pub fn finish(self) -> (ParamLayout, Vec<f64>) {
        (self.layout, self.values)
    }
}

fn view2(p: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[offset..offset + rows * cols]).expect("layout matches")
}

fn view2_mut(g: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut g[offset..offset + rows * cols]).expect("layout matches")
}

/// Row-wise affine map `y = x Wᵀ + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, input: usize, output: usize, gain: f64) -> Self {
        let w = pb.normal(format!("{name}.weight"), vec![output, input], gain / (input as f64).sqrt());
        let b = pb.constant(format!("{name}.bias"), vec![output], 0.0);
        Self { w, b, input, output }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = view2(p, self.w, self.output, self.input);
        let mut y = x.dot(&w.t());
        let b = ndarray::ArrayView1::from(&p[self.b..self.b + self.output]);
        y += &b;
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        {
            let mut gw = view2_mut(g, self.w, self.output, self.input);
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        for (gb, s) in g[self.b..self.b + self.output].iter_mut().zip(dy.sum_axis(Axis(0))) {
            *gb += s;
        }
        dy.dot(&view2(p, self.w, self.output, self.input))
    }
}

/// 1-D convolution over time with replicate padding.
///
/// Output position `o` reads input frames `o·stride + j − pad_left` for
/// taps `j < kernel`, clamped into `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    t_in: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (input * kernel) as f64;
        let w = pb.normal(format!("{name}.weight"), vec![output, kernel * input], gain / fan_in.sqrt());
        let b = pb.constant(format!("{name}.bias"), vec![output], 0.0);
        Self { w, b, input, output, kernel, stride, pad_left, pad_right }
    }

    /// Same-length convolution (`stride 1`, odd kernel).
    pub fn same<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, input: usize, output: usize, kernel: usize, gain: f64) -> Self {
        Self::build(pb, name, input, output, kernel, 1, kernel / 2, kernel / 2, gain)
    }

    /// Halves the sequence length (`kernel 4, stride 2`).
    pub fn down<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, input: usize, output: usize, gain: f64) -> Self {
        Self::build(pb, name, input, output, 4, 2, 1, 1, gain)
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + self.pad_left + self.pad_right - self.kernel) / self.stride + 1
    }

    fn source(&self, o: usize, j: usize, t_in: usize) -> usize {
        let raw = (o * self.stride + j) as isize - self.pad_left as isize;
        raw.clamp(0, t_in as isize - 1) as usize
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> (Array2<f64>, ConvCache) {
        let t_in = x.nrows();
        let t_out = self.out_len(t_in);
        let mut cols = Array2::zeros((t_out, self.kernel * self.input));
        for o in 0..t_out {
            let mut row = cols.row_mut(o);
            for j in 0..self.kernel {
                let src = self.source(o, j, t_in);
                row.slice_mut(ndarray::s![j * self.input..(j + 1) * self.input]).assign(&x.row(src));
            }
        }
        let w = view2(p, self.w, self.output, self.kernel * self.input);
        let mut y = cols.dot(&w.t());
        y += &ndarray::ArrayView1::from(&p[self.b..self.b + self.output]);
        (y, ConvCache { cols, t_in })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &ConvCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let kc = self.kernel * self.input;
        {
            let mut gw = view2_mut(g, self.w, self.output, kc);
            general_mat_mul(1.0, &dy.t(), &cache.cols, 1.0, &mut gw);
        }
        for (gb, s) in g[self.b..self.b + self.output].iter_mut().zip(dy.sum_axis(Axis(0))) {
            *gb += s;
        }
        let dcols = dy.dot(&view2(p, self.w, self.output, kc));
        let mut dx = Array2::zeros((cache.t_in, self.input));
        for o in 0..dy.nrows() {
            for j in 0..self.kernel {
                let src = self.source(o, j, cache.t_in);
                let mut target = dx.row_mut(src);
                target += &dcols.slice(ndarray::s![o, j * self.input..(j + 1) * self.input]);
            }
        }
        dx
    }
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// Backward of SiLU given the pre-activation.
pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(x, |d, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *d *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// Nearest-neighbour ×2 upsampling along time.
pub fn upsample2(x: &Array2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((2 * x.nrows(), x.ncols()));
    for (t, row) in x.rows().into_iter().enumerate() {
        y.row_mut(2 * t).assign(&row);
        y.row_mut(2 * t + 1).assign(&row);
    }
    y
}

pub fn upsample2_backward(dy: &Array2<f64>) -> Array2<f64> {
    let t = dy.nrows() / 2;
    let mut dx = Array2::zeros((t, dy.ncols()));
    for i in 0..t {
        let sum = &dy.row(2 * i) + &dy.row(2 * i + 1);
        dx.row_mut(i).assign(&sum);
    }
    dx
}

/// `y = x + conv2(silu(conv1(silu(x))))`, both convolutions length-preserving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

pub struct ResCache {
    x: Array2<f64>,
    c1: Array2<f64>,
    k1: ConvCache,
    k2: ConvCache,
}

impl ResBlock {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, width: usize) -> Self {
        let conv1 = Conv1d::same(pb, &format!("{name}.conv1"), width, width, 3, 1.0);
        // small residual branch at init keeps deep stacks close to identity
        let conv2 = Conv1d::same(pb, &format!("{name}.conv2"), width, width, 3, 0.1);
        Self { conv1, conv2 }
    }

    pub fn forward(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, ResCache) {
        let (c1, k1) = self.conv1.forward(p, silu(&x).view());
        let (c2, k2) = self.conv2.forward(p, silu(&c1).view());
        let y = &x + &c2;
        (y, ResCache { x, c1, k1, k2 })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &ResCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh2 = self.conv2.backward(p, g, &cache.k2, dy.view());
        let dc1 = silu_backward(&cache.c1, &dh2);
        let dh1 = self.conv1.backward(p, g, &cache.k1, dc1.view());
        dy + &silu_backward(&cache.x, &dh1)
    }
}
