//! Layers over `[batch, channels, height, width]` tensors. Dense features are
//! carried as `[batch, features, 1, 1]`.
//!
//! Each layer caches what it needs during `forward` and consumes it in the
//! following `backward`, which returns the gradient with respect to the
//! layer input and accumulates parameter gradients.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::ops::{self, Window};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor. Buffers (batch-norm running statistics) are saved and
/// loaded with the weights but never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub buffer: bool,
}

impl Param {
    fn new(value: ArrayD<f64>) -> Param {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            buffer: false,
        }
    }

    fn buffer(value: ArrayD<f64>) -> Param {
        Param {
            buffer: true,
            ..Param::new(value)
        }
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Layer: Send {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>>;
    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>>;
    /// Calls `f` with the dotted path of every parameter and buffer.
    fn visit(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (_, true) => prefix.to_string(),
        (true, false) => name.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

fn cached<T>(slot: &mut Option<T>, layer: &str) -> Result<T> {
    slot.take()
        .ok_or_else(|| Error::Shape(format!("{layer}: backward called without forward")))
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("4-d parameter")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality().expect("1-d parameter")
}

/// He-normal weights for a fan-in of `fan_in` inputs.
fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub window: Window,
    /// Off for a network's first layer, whose input gradient nobody reads.
    pub input_grad: bool,
    input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, window: Window, with_bias: bool, rng: &mut ChaCha8Rng) -> Conv2d {
        let fan_in = in_ch * window.kh * window.kw;
        let weight = Param::new(he_normal(&[out_ch, in_ch, window.kh, window.kw], fan_in, rng));
        let bias = with_bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[out_ch]))));
        Conv2d {
            weight,
            bias,
            window,
            input_grad: true,
            input: None,
        }
    }

    /// Backward returns zeros instead of the input gradient.
    pub fn without_input_grad(mut self) -> Conv2d {
        self.input_grad = false;
        self
    }

    fn kernels(&self) -> Array4<f64> {
        as4(&self.weight.value).to_owned()
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        let kernels = self.kernels();
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.window.output(h, w)?;
        let o = kernels.dim().0;
        let maps: Vec<Array3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| ops::conv2d_single(x.index_axis(Axis(0), i), &kernels, &self.window))
            .collect::<Result<_>>()?;
        let mut out = Array4::zeros((n, o, oh, ow));
        for (i, m) in maps.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&m);
        }
        if let Some(b) = &self.bias {
            let b = as1(&b.value);
            for mut sample in out.outer_iter_mut() {
                for (j, mut map) in sample.outer_iter_mut().enumerate() {
                    map += b[j];
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let x = cached(&mut self.input, "conv2d")?;
        let kernels = self.kernels();
        let (o, c, kh, kw) = kernels.dim();
        let (n, _, h, w) = x.dim();
        let win = self.window;
        let input_grad = self.input_grad;
        let wmat = kernels
            .into_shape_with_order((o, c * kh * kw))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let parts: Vec<(Array2<f64>, Option<Array3<f64>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = ops::im2col(x.index_axis(Axis(0), i), &win)?;
                let g = grad.index_axis(Axis(0), i);
                let (go, gh, gw) = g.dim();
                let g2 = g
                    .to_owned()
                    .into_shape_with_order((go, gh * gw))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let dw = g2.dot(&cols.t());
                if !input_grad {
                    return Ok((dw, None));
                }
                let dcols = wmat.t().dot(&g2);
                Ok((dw, Some(ops::col2im(dcols.view(), c, h, w, &win)?)))
            })
            .collect::<Result<_>>()?;
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
        // summed in sample order so results do not depend on thread timing
        for (i, (dwi, dxi)) in parts.into_iter().enumerate() {
            dw += &dwi;
            if let Some(dxi) = dxi {
                dx.index_axis_mut(Axis(0), i).assign(&dxi);
            }
        }
        self.weight.grad += &dw
            .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
            .map_err(|e| Error::Shape(e.to_string()))?;
        if let Some(b) = &mut self.bias {
            let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            b.grad += &db.into_dyn();
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization over the channel axis. Training mode normalizes with
/// batch statistics and updates running estimates; eval mode uses the
/// running estimates.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f64) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            eps,
            momentum: 0.1,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.gamma.value.len() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {c}",
                self.gamma.value.len()
            )));
        }
        let count = (n * h * w) as f64;
        let train = mode == Mode::Train && n * h * w > 1;
        let (mean, var) = if train {
            let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / count;
            let mut var = Array1::zeros(c);
            for ci in 0..c {
                let m = mean[ci];
                var[ci] = x.slice(s![.., ci, .., ..]).fold(0.0, |a, v| a + (v - m) * (v - m)) / count;
            }
            let unbiased = &var * (count / (count - 1.0));
            let mo = self.momentum;
            let rm = &as1(&self.running_mean.value) * (1.0 - mo) + &mean * mo;
            let rv = &as1(&self.running_var.value) * (1.0 - mo) + &unbiased * mo;
            self.running_mean.value = rm.into_dyn();
            self.running_var.value = rv.into_dyn();
            (mean, var)
        } else {
            (
                as1(&self.running_mean.value).to_owned(),
                as1(&self.running_var.value).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let gamma = as1(&self.gamma.value);
        let beta = as1(&self.beta.value);
        let mut xhat = x.clone();
        let mut out = Array4::zeros(x.raw_dim());
        for ci in 0..c {
            let mut xs = xhat.slice_mut(s![.., ci, .., ..]);
            xs.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
            out.slice_mut(s![.., ci, .., ..])
                .assign(&xs.mapv(|v| v * gamma[ci] + beta[ci]));
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let BnCache { xhat, inv_std, train } = cached(&mut self.cache, "batch norm")?;
        let (n, c, h, w) = grad.dim();
        let count = (n * h * w) as f64;
        let gamma = as1(&self.gamma.value).to_owned();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = Array4::zeros(grad.raw_dim());
        for ci in 0..c {
            let g = grad.slice(s![.., ci, .., ..]);
            let xh = xhat.slice(s![.., ci, .., ..]);
            let sum_g = g.sum();
            let sum_gx = (&g * &xh).sum();
            dbeta[ci] = sum_g;
            dgamma[ci] = sum_gx;
            let k = gamma[ci] * inv_std[ci];
            let mut d = dx.slice_mut(s![.., ci, .., ..]);
            if train {
                ndarray::Zip::from(&mut d).and(&g).and(&xh).for_each(|d, &g, &xh| {
                    *d = k * (g - sum_g / count - xh * sum_gx / count);
                });
            } else {
                d.assign(&g.mapv(|g| k * g));
            }
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        self.mask = Some(x.mapv(|v| v > 0.0));
        Ok(ops::relu(x))
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let mask = cached(&mut self.mask, "relu")?;
        let mut dx = grad.clone();
        ndarray::Zip::from(&mut dx).and(&mask).for_each(|d, &m| {
            if !m {
                *d = 0.0
            }
        });
        Ok(dx)
    }
}

type Shape4 = (usize, usize, usize, usize);

pub struct MaxPool2d {
    pub window: Window,
    /// Winning input index per output cell, and the input shape.
    cache: Option<(Array4<usize>, Shape4)>,
}

impl MaxPool2d {
    pub fn new(window: Window) -> MaxPool2d {
        MaxPool2d { window, cache: None }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.window.output(h, w)?;
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut idx = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            let (o, ix) = ops::max_pool_indexed(x.index_axis(Axis(0), i), &self.window)?;
            out.index_axis_mut(Axis(0), i).assign(&o);
            idx.index_axis_mut(Axis(0), i).assign(&ix);
        }
        self.cache = Some((idx, x.dim()));
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let (idx, (n, c, h, w)) = cached(&mut self.cache, "max pool")?;
        let (_, _, oh, ow) = idx.dim();
        let g = grad.as_standard_layout();
        let g = g.as_slice().expect("standard layout");
        let idx = idx.as_slice().expect("standard layout");
        let mut dx = vec![0.0; n * c * h * w];
        for (p, plane) in dx.chunks_exact_mut(h * w).enumerate() {
            let at = &idx[p * oh * ow..][..oh * ow];
            for (&a, &v) in at.iter().zip(&g[p * oh * ow..][..oh * ow]) {
                plane[a] += v;
            }
        }
        Array4::from_shape_vec((n, c, h, w), dx).map_err(|e| Error::Shape(e.to_string()))
    }
}

pub struct AvgPool2d {
    pub window: Window,
    pub count_pad: bool,
    shape: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2d {
    pub fn new(window: Window, count_pad: bool) -> AvgPool2d {
        AvgPool2d {
            window,
            count_pad,
            shape: None,
        }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.window.output(h, w)?;
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i).assign(&ops::avg_pool(
                x.index_axis(Axis(0), i),
                &self.window,
                self.count_pad,
            )?);
        }
        self.shape = Some(x.dim());
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = cached(&mut self.shape, "avg pool")?;
        let (_, _, oh, ow) = grad.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye, xs, xe, cnt) = ops::avg_extent(oy, ox, h, w, &self.window, self.count_pad);
                for i in 0..n {
                    for ci in 0..c {
                        let g = grad[[i, ci, oy, ox]] / cnt;
                        dx.slice_mut(s![i, ci, ys..ye, xs..xe]).mapv_inplace(|v| v + g);
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Spatial mean per channel: `[n, c, h, w]` to `[n, c, 1, 1]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<(usize, usize, usize, usize)>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        let (n, c, _, _) = x.dim();
        let mut out = Array4::zeros((n, c, 1, 1));
        for i in 0..n {
            let v = ops::global_avg_pool(&x.index_axis(Axis(0), i).to_owned());
            out.slice_mut(s![i, .., 0, 0]).assign(&v);
        }
        self.shape = Some(x.dim());
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = cached(&mut self.shape, "global avg pool")?;
        let mut dx = Array4::zeros((n, c, h, w));
        let area = (h * w) as f64;
        for i in 0..n {
            for ci in 0..c {
                dx.slice_mut(s![i, ci, .., ..]).fill(grad[[i, ci, 0, 0]] / area);
            }
        }
        Ok(dx)
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` during
/// training; identity in eval mode.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Array4<f64>>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Dropout {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let rng = &mut self.rng;
        let mask = Array4::from_shape_simple_fn(x.raw_dim(), || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let out = x * &mask;
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(match self.mask.take() {
            Some(m) => grad * &m,
            None => grad.clone(),
        })
    }
}

/// Fully connected layer on `[n, in, 1, 1]` features.
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Dense {
            weight: Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[outputs, inputs]), || {
                dist.sample(rng)
            })),
            bias: Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[outputs]), || dist.sample(rng))),
            input: None,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality().expect("2-d weight")
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Result<Array4<f64>> {
        let (n, f, h, w) = x.dim();
        let wt = self.weight2();
        if h != 1 || w != 1 || f != wt.dim().1 {
            return Err(Error::Shape(format!(
                "dense layer expects [n, {}, 1, 1], got {:?}",
                wt.dim().1,
                x.dim()
            )));
        }
        let x2 = x.to_shape((n, f)).map_err(|e| Error::Shape(e.to_string()))?.to_owned();
        let y = x2.dot(&wt.t()) + as1(&self.bias.value);
        let o = y.dim().1;
        self.input = Some(x2);
        y.into_shape_with_order((n, o, 1, 1))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let x2 = cached(&mut self.input, "dense")?;
        let (n, o, _, _) = grad.dim();
        let g2 = grad
            .to_shape((n, o))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let dw = g2.t().dot(&x2);
        let dx = g2.dot(&self.weight2());
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &g2.sum_axis(Axis(0)).into_dyn();
        let f = dx.dim().1;
        dx.into_shape_with_order((n, f, 1, 1))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
