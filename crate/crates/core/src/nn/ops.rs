//! Stateless tensor operations on single feature-map stacks laid out as
//! `[channels, height, width]`, plus the im2col kernels the layers build on.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Dimension, Zip};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Geometry of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, pad: usize) -> Window {
        Window {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.sh == 0 || self.sw == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if h + 2 * self.ph < self.kh || w + 2 * self.pw < self.kw {
            return Err(Error::Shape(format!(
                "input {h}x{w} (padding {}x{}) smaller than window {}x{}",
                self.ph, self.pw, self.kh, self.kw
            )));
        }
        Ok((
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        ))
    }
}

/// Output columns `ox` whose tap `k` lands inside `0..w`:
/// `0 <= ox * s + k - p < w`.
fn valid_span(ow: usize, s: usize, k: usize, p: usize, w: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if w + p > k { (w + p - k).div_ceil(s) } else { 0 };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

/// Unfolds every window of `x` into a column: `[C*kh*kw, OH*OW]`.
/// Out-of-bounds (padding) positions read as zero.
pub fn im2col(x: ArrayView3<f64>, win: &Window) -> Result<Array2<f64>> {
    let (c, h, w) = x.dim();
    let (oh, ow) = win.output(h, w)?;
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut cols = vec![0.0; c * win.kh * win.kw * oh * ow];
    if oh * ow > 0 {
        for (row, dst) in cols.chunks_exact_mut(oh * ow).enumerate() {
            let kj = row % win.kw;
            let ki = (row / win.kw) % win.kh;
            let plane = &src[(row / (win.kw * win.kh)) * h * w..][..h * w];
            let (lo, hi) = valid_span(ow, win.sw, kj, win.pw, w);
            for oy in 0..oh {
                let iy = (oy * win.sh + ki) as isize - win.ph as isize;
                if iy < 0 || iy >= h as isize || lo >= hi {
                    continue;
                }
                let line = &plane[iy as usize * w..][..w];
                let out = &mut dst[oy * ow..][..ow];
                if win.sw == 1 {
                    out[lo..hi].copy_from_slice(&line[lo + kj - win.pw..hi + kj - win.pw]);
                } else {
                    for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                        *o = line[ox * win.sw + kj - win.pw];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * win.kh * win.kw, oh * ow), cols).map_err(|e| Error::Shape(e.to_string()))
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, win: &Window) -> Result<Array3<f64>> {
    let (oh, ow) = win.output(h, w)?;
    if cols.dim() != (c * win.kh * win.kw, oh * ow) {
        return Err(Error::Shape(format!("col2im got {:?} columns", cols.dim())));
    }
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let mut x = vec![0.0; c * h * w];
    if oh * ow > 0 {
        for (row, col) in src.chunks_exact(oh * ow).enumerate() {
            let kj = row % win.kw;
            let ki = (row / win.kw) % win.kh;
            let plane = &mut x[(row / (win.kw * win.kh)) * h * w..][..h * w];
            let (lo, hi) = valid_span(ow, win.sw, kj, win.pw, w);
            for oy in 0..oh {
                let iy = (oy * win.sh + ki) as isize - win.ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let line = &mut plane[iy as usize * w..][..w];
                let from = &col[oy * ow..][..ow];
                for ox in lo..hi {
                    line[ox * win.sw + kj - win.pw] += from[ox];
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), x).map_err(|e| Error::Shape(e.to_string()))
}

/// Cross-correlation of one sample with `kernels` `[O, C, kh, kw]`, no bias.
pub fn conv2d_single(x: ArrayView3<f64>, kernels: &Array4<f64>, win: &Window) -> Result<Array3<f64>> {
    let (o, c, kh, kw) = kernels.dim();
    if x.dim().0 != c || kh != win.kh || kw != win.kw {
        return Err(Error::Shape(format!(
            "kernels {:?} do not match input with {} channels",
            kernels.dim(),
            x.dim().0
        )));
    }
    let (oh, ow) = win.output(x.dim().1, x.dim().2)?;
    let cols = im2col(x, win)?;
    let wmat = kernels
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let out = wmat.dot(&cols);
    out.into_shape_with_order((o, oh, ow))
        .map_err(|e| Error::Shape(e.to_string()))
}

/// One convolutional layer on a `[C, H, W]` input with valid padding:
/// output map `j` is `f(sum_a w_j * y_a + b_j)`, where `*` slides the
/// `j`-th kernel over input map `a`. Kernels are `[O, C, k, k]` with `k` in
/// {3, 5}.
pub fn conv_forward(
    input: &Array3<f64>,
    kernels: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    activation: Activation,
) -> Result<Array3<f64>> {
    let (o, c, kh, kw) = kernels.dim();
    if kh != kw || !(kh == 3 || kh == 5) {
        return Err(Error::Shape(format!("kernel must be 3x3 or 5x5, got {kh}x{kw}")));
    }
    if c != input.dim().0 {
        return Err(Error::Shape(format!(
            "kernels expect {c} input channels, input has {}",
            input.dim().0
        )));
    }
    if bias.len() != o {
        return Err(Error::Shape(format!("bias has {} entries for {o} kernels", bias.len())));
    }
    let mut out = conv2d_single(input.view(), kernels, &Window::square(kh, stride, 0))?;
    for (j, mut map) in out.outer_iter_mut().enumerate() {
        map += bias[j];
    }
    if activation == Activation::Relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

/// `e^{x_i} / sum_y e^{x_y}`, evaluated after subtracting the maximum.
pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let z = e.sum();
    e / z
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

/// Max over each `window x window` patch taken every `stride` steps.
pub fn max_pool(input: &Array3<f64>, window: usize, stride: usize) -> Result<Array3<f64>> {
    let (out, _) = max_pool_indexed(input.view(), &Window::square(window, stride, 0))?;
    Ok(out)
}

/// Max pooling that also returns, per output cell, the flat `y * W + x`
/// index of the winning input (first maximum on ties). Padding never wins.
pub fn max_pool_indexed(x: ArrayView3<f64>, win: &Window) -> Result<(Array3<f64>, Array3<usize>)> {
    let (c, h, w) = x.dim();
    let (oh, ow) = win.output(h, w)?;
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &src[ci * h * w..][..h * w];
        for oy in 0..oh {
            let y0 = (oy * win.sh) as isize - win.ph as isize;
            let ys = y0.max(0) as usize;
            let ye = ((y0 + win.kh as isize).max(0) as usize).min(h);
            for ox in 0..ow {
                let x0 = (ox * win.sw) as isize - win.pw as isize;
                let xs = x0.max(0) as usize;
                let xe = ((x0 + win.kw as isize).max(0) as usize).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for iy in ys..ye {
                    let line = &plane[iy * w..][..w];
                    for (ix, &v) in line.iter().enumerate().take(xe).skip(xs) {
                        if v > best || at == usize::MAX {
                            best = v;
                            at = iy * w + ix;
                        }
                    }
                }
                out.push(best);
                idx.push(at);
            }
        }
    }
    Ok((
        Array3::from_shape_vec((c, oh, ow), out).map_err(|e| Error::Shape(e.to_string()))?,
        Array3::from_shape_vec((c, oh, ow), idx).map_err(|e| Error::Shape(e.to_string()))?,
    ))
}

/// Average pooling. With `count_pad`, padded cells count toward the divisor.
pub fn avg_pool(x: ArrayView3<f64>, win: &Window, count_pad: bool) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    let (oh, ow) = win.output(h, w)?;
    let mut out = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let (ys, ye, xs, xe, n) = avg_extent(oy, ox, h, w, win, count_pad);
            for ci in 0..c {
                out[[ci, oy, ox]] = x.slice(s![ci, ys..ye, xs..xe]).sum() / n;
            }
        }
    }
    Ok(out)
}

/// Input range covered by an average-pool cell and its divisor.
pub(crate) fn avg_extent(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    win: &Window,
    count_pad: bool,
) -> (usize, usize, usize, usize, f64) {
    let y0 = (oy * win.sh) as isize - win.ph as isize;
    let x0 = (ox * win.sw) as isize - win.pw as isize;
    let ys = y0.max(0) as usize;
    let xs = x0.max(0) as usize;
    let ye = ((y0 + win.kh as isize) as usize).min(h);
    let xe = ((x0 + win.kw as isize) as usize).min(w);
    let n = if count_pad {
        // padded cells only; windows never extend past the padded border
        let ye_p = (y0 + win.kh as isize).min((h + win.ph) as isize);
        let xe_p = (x0 + win.kw as isize).min((w + win.pw) as isize);
        ((ye_p - y0) * (xe_p - x0)) as f64
    } else {
        ((ye - ys) * (xe - xs)) as f64
    };
    (ys, ye, xs, xe, n)
}

/// Per-channel spatial mean of a `[C, H, W]` stack.
pub fn global_avg_pool(input: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array1::zeros(c);
    if h * w == 0 {
        return out;
    }
    Zip::from(&mut out)
        .and(input.outer_iter())
        .for_each(|o, map| *o = map.sum() / (h * w) as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Array3::zeros((1, 3, 3));
        let k = Array4::from_elem((1, 1, 3, 3), 0.7);
        let out = conv_forward(&x, &k, &Array1::zeros(1), 1, Activation::Identity).unwrap();
        assert_eq!(out, Array3::<f64>::zeros((1, 1, 1)));
    }

    #[test]
    fn delta_picks_center_weight() {
        let mut x = Array3::zeros((1, 3, 3));
        x[[0, 1, 1]] = 1.0;
        let k = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64 + 0.5);
        let out = conv_forward(&x, &k, &Array1::zeros(1), 1, Activation::Identity).unwrap();
        assert_eq!(out.dim(), (1, 1, 1));
        assert_eq!(out[[0, 0, 0]], k[[0, 0, 1, 1]]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Array3::zeros((2, 5, 5));
        let b = Array1::zeros(1);
        assert!(conv_forward(&x, &Array4::zeros((1, 3, 3, 3)), &b, 1, Activation::Identity).is_err());
        assert!(conv_forward(&x, &Array4::zeros((1, 2, 4, 4)), &b, 1, Activation::Identity).is_err());
        let small = Array3::zeros((2, 2, 2));
        assert!(conv_forward(&small, &Array4::zeros((1, 2, 3, 3)), &b, 1, Activation::Identity).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&array![-1.0, 0.0, 2.0]), array![0.0, 0.0, 2.0]);
        assert_eq!(relu(&array![-3.0, -0.1]), array![0.0, 0.0]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(array![0.0, 0.0].view()), array![0.5, 0.5]);
        let p = softmax(array![7.0, 7.0, 7.0].view());
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(array![1000.0, 0.0].view());
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
        // e^-1000 underflows f64; the exact value is ~5e-435
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn pooling_cases() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool(&x, 2, 2).unwrap(), Array3::from_elem((1, 1, 1), 4.0));
        let c = Array3::from_elem((2, 6, 6), 3.5);
        assert!(max_pool(&c, 2, 2).unwrap().iter().all(|v| *v == 3.5));
        assert!(max_pool(&x, 3, 1).is_err());

        assert_eq!(global_avg_pool(&Array3::ones((1, 4, 4))), array![1.0]);
        let ramp = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&ramp), array![1.5]);
    }

    #[test]
    fn avg_pool_divisors() {
        let x = Array3::ones((1, 3, 3));
        let win = Window::square(3, 1, 1);
        let incl = avg_pool(x.view(), &win, true).unwrap();
        let excl = avg_pool(x.view(), &win, false).unwrap();
        assert!((incl[[0, 0, 0]] - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(excl[[0, 0, 0]], 1.0);
        assert_eq!(incl[[0, 1, 1]], 1.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let win = Window {
            kh: 3,
            kw: 2,
            sh: 2,
            sw: 1,
            ph: 1,
            pw: 1,
        };
        let x = Array3::from_shape_fn((2, 5, 4), |(a, b, c)| ((a * 31 + b * 7 + c * 3) % 11) as f64 - 5.0);
        let cols = im2col(x.view(), &win).unwrap();
        let y = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let lhs = (&cols * &y).sum();
        let rhs = (&x * &col2im(y.view(), 2, 5, 4, &win).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
