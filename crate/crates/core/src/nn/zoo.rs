//! Backbone architectures and the two-class head.
//!
//! Parameter paths follow the torchvision layout for the ResNets and
//! InceptionV3 and the timm layout for Inception-ResNetV2, so exported
//! ImageNet weights load by name. The head lives under `head.fc`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Concat, Residual, Sequential};
use super::layers::{
    AvgPool2d, BatchNorm2d, Conv2d, Dense, Dropout, GlobalAvgPool, Layer, MaxPool2d, Mode, Param, Relu,
};
use super::ops::{self, Window};
use super::weights;
use crate::{Backbone, Error, Result};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const HEAD_PREFIX: &str = "head.fc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub input_side: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub pretrained: bool,
    /// Seed for every randomly initialized parameter and the dropout stream.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for `backbone`: pretrained unless it is the from-scratch CNN.
    pub fn new(backbone: Backbone) -> ModelConfig {
        ModelConfig {
            backbone,
            input_side: backbone.input_side(),
            num_classes: NUM_CLASSES,
            dropout_rate: DEFAULT_DROPOUT,
            pretrained: backbone != Backbone::TinyCnn,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side != self.backbone.input_side() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {}px inputs, not {}",
                self.backbone,
                self.backbone.input_side(),
                self.input_side
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "the head is binary; num_classes must be {NUM_CLASSES}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.pretrained && self.backbone == Backbone::TinyCnn {
            return Err(Error::InvalidArgument("tiny_cnn has no pretrained weights".into()));
        }
        Ok(())
    }
}

/// A backbone plus global pooling, dropout and a dense layer. Inputs are
/// `[batch, side, side, 3]`; outputs are `[batch, 2]` with column 1 the
/// positive class.
pub struct Model {
    config: ModelConfig,
    body: Sequential,
    gap: GlobalAvgPool,
    dropout: Dropout,
    fc: Dense,
}

/// Builds the model and, when `config.pretrained`, loads
/// `{weights_dir}/{backbone}.safetensors`.
pub fn build_model(config: &ModelConfig, weights_dir: &Path) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let (body, width) = match config.backbone {
        Backbone::TinyCnn => tiny_cnn(&mut rng),
        Backbone::ResNet50 => resnet(&[3, 4, 6, 3], &mut rng),
        Backbone::ResNet101 => resnet(&[3, 4, 23, 3], &mut rng),
        Backbone::ResNet152 => resnet(&[3, 8, 36, 3], &mut rng),
        Backbone::InceptionV3 => inception_v3(&mut rng),
        Backbone::InceptionResNetV2 => inception_resnet_v2(&mut rng),
    };
    let fc = Dense::new(width, config.num_classes, &mut rng);
    let mut model = Model {
        config: config.clone(),
        body,
        gap: GlobalAvgPool::default(),
        dropout: Dropout::new(config.dropout_rate, config.init_seed ^ 0xD80F_0000),
        fc,
    };
    if config.pretrained {
        let path = weights::pretrained_path(weights_dir, config.backbone);
        if !path.is_file() {
            return Err(Error::WeightsUnavailable {
                backbone: config.backbone.to_string(),
                instructions: weights::export_instructions(config.backbone, &path),
                path,
            });
        }
        let tensors = weights::load_tensors(&path)?;
        model.load_state(&tensors, true)?;
    }
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn to_nchw(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, h, w, c) = images.dim();
        let s = self.config.input_side;
        if h != s || w != s || c != 3 {
            return Err(Error::Shape(format!(
                "{} expects [batch, {s}, {s}, 3] input, got {:?}",
                self.config.backbone,
                images.dim()
            )));
        }
        Ok(images
            .view()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned())
    }

    /// Raw class scores `[batch, 2]`.
    pub fn logits(&mut self, images: &Array4<f64>, mode: Mode) -> Result<Array2<f64>> {
        let x = self.to_nchw(images)?;
        let h = self.body.forward(&x, mode)?;
        let h = self.gap.forward(&h, mode)?;
        let h = self.dropout.forward(&h, mode)?;
        let y = self.fc.forward(&h, mode)?;
        let (n, o, _, _) = y.dim();
        y.into_shape_with_order((n, o)).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Class probabilities; each row sums to one.
    pub fn forward(&mut self, images: &Array4<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(ops::softmax_rows(&self.logits(images, mode)?))
    }

    /// Inference-mode probabilities.
    pub fn predict_proba(&mut self, images: &Array4<f64>) -> Result<Array2<f64>> {
        self.forward(images, Mode::Eval)
    }

    /// Backpropagates a gradient on the logits of the last forward pass,
    /// accumulating into parameter gradients.
    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Result<()> {
        let (n, o) = dlogits.dim();
        let g = dlogits
            .to_shape((n, o, 1, 1))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let g = self.fc.backward(&g)?;
        let g = self.dropout.backward(&g)?;
        let g = self.gap.backward(&g)?;
        self.body.backward(&g)?;
        Ok(())
    }

    /// Mean cross-entropy of `targets` (0 negative, 1 positive) under a
    /// forward pass in `mode`, with gradients accumulated. Returns the loss
    /// and the probabilities.
    pub fn loss_and_grad(&mut self, images: &Array4<f64>, targets: &[u8], mode: Mode) -> Result<(f64, Array2<f64>)> {
        let logits = self.logits(images, mode)?;
        let n = logits.nrows();
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} images", targets.len())));
        }
        let probs = ops::softmax_rows(&logits);
        let mut loss = 0.0;
        let mut grad = probs.clone();
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t as usize];
            grad[[i, t as usize]] -= 1.0;
        }
        grad /= n as f64;
        self.backward(&grad)?;
        Ok((loss / n as f64, probs))
    }

    /// Visits every parameter and buffer with its dotted path.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.body.visit("", f);
        self.fc.visit(HEAD_PREFIX, f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.grad.fill(0.0));
    }

    /// Trainable scalar count (buffers excluded).
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if !p.buffer {
                n += p.value.len()
            }
        });
        n
    }

    pub fn state(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            out.insert(name.to_string(), p.value.clone());
        });
        out
    }

    /// Copies tensors in by name. Extra tensors are ignored; missing ones are
    /// an error unless they belong to the head and `head_optional` is set.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, ArrayD<f64>>, head_optional: bool) -> Result<()> {
        let mut problems = Vec::new();
        self.visit_params(&mut |name, p| match tensors.get(name) {
            Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
            Some(t) => problems.push(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.value.shape())),
            None if head_optional && name.starts_with(HEAD_PREFIX) => {}
            None => problems.push(format!("{name}: missing")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            let shown = problems.len().min(8);
            Err(Error::Checkpoint(format!(
                "{} tensor(s) do not fit {}: {}{}",
                problems.len(),
                self.config.backbone,
                problems[..shown].join("; "),
                if problems.len() > shown { "; ..." } else { "" }
            )))
        }
    }

    /// Parameters and their gradients, in visiting order. Test helper for
    /// gradient checks.
    pub fn param_names(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, p| {
            if !p.buffer {
                out.push(n.to_string())
            }
        });
        out
    }
}

fn win(kh: usize, kw: usize, stride: usize, ph: usize, pw: usize) -> Window {
    Window {
        kh,
        kw,
        sh: stride,
        sw: stride,
        ph,
        pw,
    }
}

fn conv_bn_relu(cin: usize, cout: usize, w: Window, eps: f64, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new()
        .with("conv", Conv2d::new(cin, cout, w, false, rng))
        .with("bn", BatchNorm2d::new(cout, eps))
        .with("", Relu::default())
}

fn tiny_cnn(rng: &mut ChaCha8Rng) -> (Sequential, usize) {
    let body = Sequential::new()
        .with(
            "conv1",
            Conv2d::new(3, 8, Window::square(3, 1, 0), true, rng).without_input_grad(),
        )
        .with("", Relu::default())
        .with("", MaxPool2d::new(Window::square(2, 2, 0)))
        .with("conv2", Conv2d::new(8, 16, Window::square(3, 1, 0), true, rng))
        .with("", Relu::default());
    (body, 16)
}

const RESNET_EPS: f64 = 1e-5;

fn bottleneck(cin: usize, planes: usize, stride: usize, rng: &mut ChaCha8Rng) -> Residual {
    let out = planes * 4;
    let main = Sequential::new()
        .with("conv1", Conv2d::new(cin, planes, Window::square(1, 1, 0), false, rng))
        .with("bn1", BatchNorm2d::new(planes, RESNET_EPS))
        .with("", Relu::default())
        .with(
            "conv2",
            Conv2d::new(planes, planes, Window::square(3, stride, 1), false, rng),
        )
        .with("bn2", BatchNorm2d::new(planes, RESNET_EPS))
        .with("", Relu::default())
        .with("conv3", Conv2d::new(planes, out, Window::square(1, 1, 0), false, rng))
        .with("bn3", BatchNorm2d::new(out, RESNET_EPS));
    let block = Residual::new(main, 1.0, true);
    if stride != 1 || cin != out {
        block.with_shortcut(
            Sequential::new()
                .with("0", Conv2d::new(cin, out, Window::square(1, stride, 0), false, rng))
                .with("1", BatchNorm2d::new(out, RESNET_EPS)),
        )
    } else {
        block
    }
}

fn resnet(blocks: &[usize; 4], rng: &mut ChaCha8Rng) -> (Sequential, usize) {
    let mut body = Sequential::new()
        .with(
            "conv1",
            Conv2d::new(3, 64, Window::square(7, 2, 3), false, rng).without_input_grad(),
        )
        .with("bn1", BatchNorm2d::new(64, RESNET_EPS))
        .with("", Relu::default())
        .with("", MaxPool2d::new(Window::square(3, 2, 1)));
    let mut cin = 64;
    for (i, (&n, planes)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        let mut stage = Sequential::new();
        for b in 0..n {
            let stride = if b == 0 && i > 0 { 2 } else { 1 };
            stage.push(b.to_string(), bottleneck(cin, planes, stride, rng));
            cin = planes * 4;
        }
        body.push(format!("layer{}", i + 1), stage);
    }
    (body, cin)
}

const INCEPTION_EPS: f64 = 1e-3;

/// Conv + BN + ReLU unit of the Inception family.
fn basic(cin: usize, cout: usize, w: Window, rng: &mut ChaCha8Rng) -> Sequential {
    conv_bn_relu(cin, cout, w, INCEPTION_EPS, rng)
}

/// First layer of an Inception stem; its input gradient is never used.
fn stem(cout: usize, w: Window, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new()
        .with("conv", Conv2d::new(3, cout, w, false, rng).without_input_grad())
        .with("bn", BatchNorm2d::new(cout, INCEPTION_EPS))
        .with("", Relu::default())
}

fn k1(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Sequential {
    basic(cin, cout, win(1, 1, 1, 0, 0), rng)
}

/// Named units in a chain; torchvision keeps these flat on the block.
fn chain(units: Vec<(&str, Sequential)>) -> Sequential {
    units
        .into_iter()
        .fold(Sequential::new(), |s, (name, u)| s.with(name, u))
}

fn pool_branch(cin: usize, cout: usize, count_pad: bool, name: &str, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new()
        .with("", AvgPool2d::new(Window::square(3, 1, 1), count_pad))
        .with(name, k1(cin, cout, rng))
}

fn inception_a(cin: usize, pool: usize, rng: &mut ChaCha8Rng) -> Concat {
    Concat::new()
        .with("branch1x1", k1(cin, 64, rng))
        .with(
            "",
            chain(vec![
                ("branch5x5_1", k1(cin, 48, rng)),
                ("branch5x5_2", basic(48, 64, win(5, 5, 1, 2, 2), rng)),
            ]),
        )
        .with(
            "",
            chain(vec![
                ("branch3x3dbl_1", k1(cin, 64, rng)),
                ("branch3x3dbl_2", basic(64, 96, win(3, 3, 1, 1, 1), rng)),
                ("branch3x3dbl_3", basic(96, 96, win(3, 3, 1, 1, 1), rng)),
            ]),
        )
        .with("", pool_branch(cin, pool, true, "branch_pool", rng))
}

fn inception_b(cin: usize, rng: &mut ChaCha8Rng) -> Concat {
    Concat::new()
        .with("branch3x3", basic(cin, 384, win(3, 3, 2, 0, 0), rng))
        .with(
            "",
            chain(vec![
                ("branch3x3dbl_1", k1(cin, 64, rng)),
                ("branch3x3dbl_2", basic(64, 96, win(3, 3, 1, 1, 1), rng)),
                ("branch3x3dbl_3", basic(96, 96, win(3, 3, 2, 0, 0), rng)),
            ]),
        )
        .with("", MaxPool2d::new(Window::square(3, 2, 0)))
}

fn inception_c(cin: usize, c7: usize, rng: &mut ChaCha8Rng) -> Concat {
    let row = |a, b, rng: &mut ChaCha8Rng| basic(a, b, win(1, 7, 1, 0, 3), rng);
    let col = |a, b, rng: &mut ChaCha8Rng| basic(a, b, win(7, 1, 1, 3, 0), rng);
    Concat::new()
        .with("branch1x1", k1(cin, 192, rng))
        .with(
            "",
            chain(vec![
                ("branch7x7_1", k1(cin, c7, rng)),
                ("branch7x7_2", row(c7, c7, rng)),
                ("branch7x7_3", col(c7, 192, rng)),
            ]),
        )
        .with(
            "",
            chain(vec![
                ("branch7x7dbl_1", k1(cin, c7, rng)),
                ("branch7x7dbl_2", col(c7, c7, rng)),
                ("branch7x7dbl_3", row(c7, c7, rng)),
                ("branch7x7dbl_4", col(c7, c7, rng)),
                ("branch7x7dbl_5", row(c7, 192, rng)),
            ]),
        )
        .with("", pool_branch(cin, 192, true, "branch_pool", rng))
}

fn inception_d(cin: usize, rng: &mut ChaCha8Rng) -> Concat {
    Concat::new()
        .with(
            "",
            chain(vec![
                ("branch3x3_1", k1(cin, 192, rng)),
                ("branch3x3_2", basic(192, 320, win(3, 3, 2, 0, 0), rng)),
            ]),
        )
        .with(
            "",
            chain(vec![
                ("branch7x7x3_1", k1(cin, 192, rng)),
                ("branch7x7x3_2", basic(192, 192, win(1, 7, 1, 0, 3), rng)),
                ("branch7x7x3_3", basic(192, 192, win(7, 1, 1, 3, 0), rng)),
                ("branch7x7x3_4", basic(192, 192, win(3, 3, 2, 0, 0), rng)),
            ]),
        )
        .with("", MaxPool2d::new(Window::square(3, 2, 0)))
}

/// 1x3 and 3x1 convolutions side by side.
fn split_pair(cin: usize, a: &str, b: &str, rng: &mut ChaCha8Rng) -> Concat {
    Concat::new()
        .with(a, basic(cin, 384, win(1, 3, 1, 0, 1), rng))
        .with(b, basic(cin, 384, win(3, 1, 1, 1, 0), rng))
}

fn inception_e(cin: usize, rng: &mut ChaCha8Rng) -> Concat {
    Concat::new()
        .with("branch1x1", k1(cin, 320, rng))
        .with(
            "",
            Sequential::new()
                .with("branch3x3_1", k1(cin, 384, rng))
                .with("", split_pair(384, "branch3x3_2a", "branch3x3_2b", rng)),
        )
        .with(
            "",
            Sequential::new()
                .with("branch3x3dbl_1", k1(cin, 448, rng))
                .with("branch3x3dbl_2", basic(448, 384, win(3, 3, 1, 1, 1), rng))
                .with("", split_pair(384, "branch3x3dbl_3a", "branch3x3dbl_3b", rng)),
        )
        .with("", pool_branch(cin, 192, true, "branch_pool", rng))
}

fn inception_v3(rng: &mut ChaCha8Rng) -> (Sequential, usize) {
    let mut body = Sequential::new()
        .with("Conv2d_1a_3x3", stem(32, win(3, 3, 2, 0, 0), rng))
        .with("Conv2d_2a_3x3", basic(32, 32, win(3, 3, 1, 0, 0), rng))
        .with("Conv2d_2b_3x3", basic(32, 64, win(3, 3, 1, 1, 1), rng))
        .with("", MaxPool2d::new(Window::square(3, 2, 0)))
        .with("Conv2d_3b_1x1", k1(64, 80, rng))
        .with("Conv2d_4a_3x3", basic(80, 192, win(3, 3, 1, 0, 0), rng))
        .with("", MaxPool2d::new(Window::square(3, 2, 0)));
    body.push("Mixed_5b", inception_a(192, 32, rng))
        .push("Mixed_5c", inception_a(256, 64, rng))
        .push("Mixed_5d", inception_a(288, 64, rng))
        .push("Mixed_6a", inception_b(288, rng));
    for (name, c7) in [
        ("Mixed_6b", 128),
        ("Mixed_6c", 160),
        ("Mixed_6d", 160),
        ("Mixed_6e", 192),
    ] {
        body.push(name, inception_c(768, c7, rng));
    }
    body.push("Mixed_7a", inception_d(768, rng))
        .push("Mixed_7b", inception_e(1280, rng))
        .push("Mixed_7c", inception_e(2048, rng));
    (body, 2048)
}

/// Numbered chain of units, as in timm's `nn.Sequential` branches.
fn numbered(units: Vec<Sequential>) -> Sequential {
    units
        .into_iter()
        .enumerate()
        .fold(Sequential::new(), |s, (i, u)| s.with(i.to_string(), u))
}

fn scaled_block(branches: Concat, width: usize, cout: usize, scale: f64, relu: bool, rng: &mut ChaCha8Rng) -> Residual {
    let main = Sequential::new()
        .with("", branches)
        .with("conv2d", Conv2d::new(width, cout, win(1, 1, 1, 0, 0), true, rng));
    Residual::new(main, scale, relu)
}

fn block35(scale: f64, rng: &mut ChaCha8Rng) -> Residual {
    let b = Concat::new()
        .with("branch0", k1(320, 32, rng))
        .with(
            "branch1",
            numbered(vec![k1(320, 32, rng), basic(32, 32, win(3, 3, 1, 1, 1), rng)]),
        )
        .with(
            "branch2",
            numbered(vec![
                k1(320, 32, rng),
                basic(32, 48, win(3, 3, 1, 1, 1), rng),
                basic(48, 64, win(3, 3, 1, 1, 1), rng),
            ]),
        );
    scaled_block(b, 128, 320, scale, true, rng)
}

fn block17(scale: f64, rng: &mut ChaCha8Rng) -> Residual {
    let b = Concat::new().with("branch0", k1(1088, 192, rng)).with(
        "branch1",
        numbered(vec![
            k1(1088, 128, rng),
            basic(128, 160, win(1, 7, 1, 0, 3), rng),
            basic(160, 192, win(7, 1, 1, 3, 0), rng),
        ]),
    );
    scaled_block(b, 384, 1088, scale, true, rng)
}

fn block8(scale: f64, relu: bool, rng: &mut ChaCha8Rng) -> Residual {
    let b = Concat::new().with("branch0", k1(2080, 192, rng)).with(
        "branch1",
        numbered(vec![
            k1(2080, 192, rng),
            basic(192, 224, win(1, 3, 1, 0, 1), rng),
            basic(224, 256, win(3, 1, 1, 1, 0), rng),
        ]),
    );
    scaled_block(b, 448, 2080, scale, relu, rng)
}

fn inception_resnet_v2(rng: &mut ChaCha8Rng) -> (Sequential, usize) {
    let s2 = win(3, 3, 2, 0, 0);
    let mixed_5b = Concat::new()
        .with("branch0", k1(192, 96, rng))
        .with(
            "branch1",
            numbered(vec![k1(192, 48, rng), basic(48, 64, win(5, 5, 1, 2, 2), rng)]),
        )
        .with(
            "branch2",
            numbered(vec![
                k1(192, 64, rng),
                basic(64, 96, win(3, 3, 1, 1, 1), rng),
                basic(96, 96, win(3, 3, 1, 1, 1), rng),
            ]),
        )
        .with("branch3", pool_branch(192, 64, false, "1", rng));
    let mixed_6a = Concat::new()
        .with("branch0", basic(320, 384, s2, rng))
        .with(
            "branch1",
            numbered(vec![
                k1(320, 256, rng),
                basic(256, 256, win(3, 3, 1, 1, 1), rng),
                basic(256, 384, s2, rng),
            ]),
        )
        .with("branch2", MaxPool2d::new(Window::square(3, 2, 0)));
    let mixed_7a = Concat::new()
        .with("branch0", numbered(vec![k1(1088, 256, rng), basic(256, 384, s2, rng)]))
        .with("branch1", numbered(vec![k1(1088, 256, rng), basic(256, 288, s2, rng)]))
        .with(
            "branch2",
            numbered(vec![
                k1(1088, 256, rng),
                basic(256, 288, win(3, 3, 1, 1, 1), rng),
                basic(288, 320, s2, rng),
            ]),
        )
        .with("branch3", MaxPool2d::new(Window::square(3, 2, 0)));

    let mut repeat = Sequential::new();
    for i in 0..10 {
        repeat.push(i.to_string(), block35(0.17, rng));
    }
    let mut repeat_1 = Sequential::new();
    for i in 0..20 {
        repeat_1.push(i.to_string(), block17(0.10, rng));
    }
    let mut repeat_2 = Sequential::new();
    for i in 0..9 {
        repeat_2.push(i.to_string(), block8(0.20, true, rng));
    }

    let body = Sequential::new()
        .with("conv2d_1a", stem(32, s2, rng))
        .with("conv2d_2a", basic(32, 32, win(3, 3, 1, 0, 0), rng))
        .with("conv2d_2b", basic(32, 64, win(3, 3, 1, 1, 1), rng))
        .with("", MaxPool2d::new(Window::square(3, 2, 0)))
        .with("conv2d_3b", k1(64, 80, rng))
        .with("conv2d_4a", basic(80, 192, win(3, 3, 1, 0, 0), rng))
        .with("", MaxPool2d::new(Window::square(3, 2, 0)))
        .with("mixed_5b", mixed_5b)
        .with("repeat", repeat)
        .with("mixed_6a", mixed_6a)
        .with("repeat_1", repeat_1)
        .with("mixed_7a", mixed_7a)
        .with("repeat_2", repeat_2)
        .with("block8", block8(1.0, false, rng))
        .with("conv2d_7b", k1(2080, 1536, rng));
    (body, 1536)
}

/// Convenience for tests: a batch of images as `[n, side, side, 3]`.
pub fn stack_images(images: &[ndarray::Array3<f64>]) -> Result<Array4<f64>> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    if views.is_empty() {
        return Err(Error::EmptyInput("no images to stack".into()));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("stacking images: {e}")))
}
