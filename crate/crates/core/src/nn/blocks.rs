use ndarray::{concatenate, s, Array4, Axis};

use super::layers::{join, Layer, Mode, ParamVisitor, Relu};
use crate::{Error, Result};

/// Layers applied in order. Children with an empty name share the parent's
/// parameter prefix.
#[derive(Default)]
pub struct Sequential {
    children: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Sequential {
        Sequential::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) -> &mut Self {
        self.children.push((name.into(), Box::new(layer)));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let mut iter = self.children.iter_mut();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for (_, layer) in iter {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let mut g = grad.clone();
        for (_, layer) in self.children.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (name, layer) in &mut self.children {
            layer.visit(&join(prefix, name), f);
        }
    }
}

/// `out = shortcut(x) + scale * main(x)`, optionally followed by ReLU.
/// Without a projection the shortcut is the identity.
pub struct Residual {
    main: Box<dyn Layer>,
    shortcut: Option<Box<dyn Layer>>,
    scale: f64,
    relu: Option<Relu>,
}

impl Residual {
    pub fn new(main: impl Layer + 'static, scale: f64, post_relu: bool) -> Residual {
        Residual {
            main: Box::new(main),
            shortcut: None,
            scale,
            relu: post_relu.then(Relu::default),
        }
    }

    /// Projection shortcut, visited under `downsample`.
    pub fn with_shortcut(mut self, shortcut: impl Layer + 'static) -> Residual {
        self.shortcut = Some(Box::new(shortcut));
        self
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let m = self.main.forward(x, mode)?;
        let mut out = match &mut self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        if out.dim() != m.dim() {
            return Err(Error::Shape(format!(
                "residual branches disagree: {:?} vs {:?}",
                out.dim(),
                m.dim()
            )));
        }
        out.scaled_add(self.scale, &m);
        match &mut self.relu {
            Some(r) => r.forward(&out, mode),
            None => Ok(out),
        }
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let g = match &mut self.relu {
            Some(r) => r.backward(grad)?,
            None => grad.clone(),
        };
        let mut dx = self.main.backward(&(&g * self.scale))?;
        match &mut self.shortcut {
            Some(s) => dx += &s.backward(&g)?,
            None => dx += &g,
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.main.visit(prefix, f);
        if let Some(s) = &mut self.shortcut {
            s.visit(&join(prefix, "downsample"), f);
        }
    }
}

/// Parallel branches over the same input, concatenated on channels.
#[derive(Default)]
pub struct Concat {
    branches: Vec<(String, Box<dyn Layer>)>,
    widths: Vec<usize>,
}

impl Concat {
    pub fn new() -> Concat {
        Concat::default()
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.branches.push((name.into(), Box::new(layer)));
        self
    }
}

impl Layer for Concat {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let outs: Vec<Array4<f64>> = self
            .branches
            .iter_mut()
            .map(|(_, b)| b.forward(x, mode))
            .collect::<Result<_>>()?;
        self.widths = outs.iter().map(|o| o.dim().1).collect();
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("concat: {e}")))
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Result<Array4<f64>> {
        let mut start = 0;
        let mut dx: Option<Array4<f64>> = None;
        for ((_, b), &w) in self.branches.iter_mut().zip(&self.widths) {
            let g = grad.slice(s![.., start..start + w, .., ..]).to_owned();
            start += w;
            let d = b.backward(&g)?;
            match &mut dx {
                Some(acc) => *acc += &d,
                None => dx = Some(d),
            }
        }
        dx.ok_or_else(|| Error::Shape("concat without branches".into()))
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (name, b) in &mut self.branches {
            b.visit(&join(prefix, name), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv2d, Param};
    use crate::nn::ops::Window;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(layer: &mut dyn Layer) -> Vec<String> {
        let mut out = Vec::new();
        layer.visit("", &mut |n: &str, _: &mut Param| out.push(n.to_string()));
        out
    }

    #[test]
    fn parameter_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let main = Sequential::new()
            .with("conv1", Conv2d::new(2, 2, Window::square(3, 1, 1), false, &mut rng))
            .with("relu", Relu::default());
        let short = Sequential::new().with("0", Conv2d::new(2, 2, Window::square(1, 1, 0), false, &mut rng));
        let block = Residual::new(main, 1.0, true).with_shortcut(short);
        let mut net = Sequential::new().with("layer1", Sequential::new().with("0", block));
        assert_eq!(
            names(&mut net),
            ["layer1.0.conv1.weight", "layer1.0.downsample.0.weight"]
        );
    }

    #[test]
    fn concat_stacks_channels_and_splits_gradient() {
        let mut c = Concat::new().with("a", Sequential::new()).with("b", Relu::default());
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| c as f64 - y as f64 + x as f64 * 0.5);
        let y = c.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dim(), (1, 4, 2, 2));
        let g = Array4::ones((1, 4, 2, 2));
        let dx = c.backward(&g).unwrap();
        for ((idx, &v), &xi) in dx.indexed_iter().zip(x.iter()) {
            let expect = if xi > 0.0 { 2.0 } else { 1.0 };
            assert_eq!(v, expect, "at {idx:?}");
        }
    }

    #[test]
    fn residual_identity_scaled() {
        let mut r = Residual::new(Sequential::new(), 0.5, false);
        let x = Array4::from_elem((1, 1, 2, 2), 2.0);
        assert!(r.forward(&x, Mode::Eval).unwrap().iter().all(|&v| v == 3.0));
        let dx = r.backward(&Array4::ones((1, 1, 2, 2))).unwrap();
        assert!(dx.iter().all(|&v| v == 1.5));
    }
}
