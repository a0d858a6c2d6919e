use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const K: usize = 3;

/// 3x3 convolution, stride 1, zero padding 1, computed by im2col.
///
/// `weight` is `out x (in * 9)` with the input channel as the slow index of
/// the column dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Conv2d {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Conv2d {
            weight: Array2::zeros((output, input * K * K)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn he<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = (input * K * K) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Conv2d {
            weight: Array2::from_shape_simple_fn((output, input * K * K), || normal.sample(rng)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (K * K)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Forward pass; also returns the im2col matrix needed by [`backward`].
    ///
    /// [`backward`]: Conv2d::backward
    pub fn forward(&self, x: ArrayView3<'_, f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x);
        let mut y = self.weight.dot(&cols);
        if let Some(b) = &self.bias {
            for (mut row, bv) in y.axis_iter_mut(Axis(0)).zip(b) {
                row += *bv;
            }
        }
        let y = y
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (y, cols)
    }

    /// Accumulate parameter gradients and return `dL/dx` of shape `(in, h, w)`.
    pub fn backward(
        &self,
        cols: ArrayView2<'_, f64>,
        dy: ArrayView3<'_, f64>,
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (out, h, w) = dy.dim();
        let dy = dy
            .into_shape_with_order((out, h * w))
            .expect("contiguous gradient");
        ndarray::linalg::general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut grad.weight);
        if let Some(gb) = &mut grad.bias {
            *gb += &dy.sum_axis(Axis(1));
        }
        let dcols = self.weight.t().dot(&dy);
        col2im(dcols.view(), self.in_channels(), h, w)
    }
}

fn im2col(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * K * K, h * w));
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let mut row = cols.row_mut((ch * K + ky) * K + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = x.slice(ndarray::s![ch, sy as usize, ..]);
                    let dst = &mut row[y * w..(y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: ArrayView2<'_, f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = dcols.row((ch * K + ky) * K + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dx[[ch, sy as usize, sx as usize]] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaxPool2;

/// Flat input index of the winner of each pooling window.
pub type PoolIndices = Vec<usize>;

impl MaxPool2 {
    pub fn forward(&self, x: ArrayView3<'_, f64>) -> (Array3<f64>, PoolIndices) {
        let (c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array3::zeros((c, oh, ow));
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        let v = x[[ch, iy, ix]];
                        if v > best.0 {
                            best = (v, (ch * h + iy) * w + ix);
                        }
                    }
                    y[[ch, oy, ox]] = best.0;
                    idx.push(best.1);
                }
            }
        }
        (y, idx)
    }

    pub fn backward(
        &self,
        dy: ArrayView3<'_, f64>,
        indices: &PoolIndices,
        input_dim: (usize, usize, usize),
    ) -> Array3<f64> {
        let mut dx = Array3::zeros(input_dim);
        let flat = dx.as_slice_mut().expect("standard layout");
        for (g, &i) in dy.iter().zip(indices) {
            flat[i] += g;
        }
        dx
    }
}
