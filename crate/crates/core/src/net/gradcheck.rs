//! Central finite-difference checks of every layer kind and the loss, in
//! 64-bit arithmetic.
//!
//! The numeric side only ever calls forward passes; the analytic side calls
//! the backward pass under test. Each check contracts the layer output with a
//! fixed random tensor `r`, so the scalar objective is `Σ y ⊙ r` and its
//! output gradient is `r`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::MaskValue;

use super::layers::{Conv2d, ConvGeom, ConvTranspose2d, Layer, LayerKind};
use super::loss::softmax_cross_entropy;
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub checked: usize,
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so no probe crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// A random permutation of well-separated levels plus small jitter, so no
/// probe changes which element wins a pooling window.
fn separated(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 + rng.random_range(0.0..0.01)).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Numeric gradient of `f` with respect to every element of `values`.
fn numeric(values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + FD_STEP;
            let plus = f(values);
            values[i] = orig - FD_STEP;
            let minus = f(values);
            values[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn check_single_input(name: &str, layer: Layer<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) -> GradCheck {
    let (y, cache) = layer.forward(&[&x]).expect("forward");
    let r = uniform(rng, y.shape());
    let back = layer.backward(&cache, &r).expect("backward");

    let mut analytic: Vec<f64> = back.grad_inputs[0].data().to_vec();
    let mut xs = x.data().to_vec();
    let mut num = numeric(&mut xs, |v| {
        let xt = Tensor::from_vec(x.shape(), v.to_vec());
        dot(&layer.forward(&[&xt]).expect("forward").0, &r)
    });

    if let (Some(param), Some(pg)) = (layer.param(), back.params.as_ref()) {
        analytic.extend(&pg.weight);
        analytic.extend(&pg.bias);
        let mut w = param.weight.clone();
        num.extend(numeric(&mut w, |v| {
            let mut l = layer.clone();
            l.param_mut().expect("param").weight.copy_from_slice(v);
            dot(&l.forward(&[&x]).expect("forward").0, &r)
        }));
        let mut b = param.bias.clone();
        num.extend(numeric(&mut b, |v| {
            let mut l = layer.clone();
            l.param_mut().expect("param").bias.copy_from_slice(v);
            dot(&l.forward(&[&x]).expect("forward").0, &r)
        }));
    }
    GradCheck { name: name.into(), rel_error: rel_error(&analytic, &num), checked: num.len() }
}

fn random_conv(rng: &mut ChaCha8Rng, geom: ConvGeom) -> Conv2d<f64> {
    let mut c = Conv2d::zeros(geom);
    c.param.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    c.param.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    c.param.touch();
    c
}

fn random_convt(rng: &mut ChaCha8Rng, geom: ConvGeom) -> ConvTranspose2d<f64> {
    let mut c = ConvTranspose2d::zeros(geom);
    c.param.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    c.param.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    c.param.touch();
    c
}

pub fn check_layer(kind: LayerKind, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 2, 6, 6];
    match kind {
        LayerKind::Conv => [
            ("conv 3x3 s1 p1", ConvGeom::new(2, 3, 3, 1, 1)),
            ("conv 3x3 s2 p1", ConvGeom::new(2, 3, 3, 2, 1)),
            ("conv 1x1", ConvGeom::new(2, 2, 1, 1, 0)),
            ("conv 7x7 p3", ConvGeom::new(2, 2, 7, 1, 3)),
        ]
        .into_iter()
        .map(|(name, g)| {
            let layer = Layer::Conv(random_conv(&mut rng, g));
            let x = uniform(&mut rng, shape);
            check_single_input(name, layer, x, &mut rng)
        })
        .collect(),
        LayerKind::ConvTranspose => [
            ("conv-transpose k4 s2 p1", ConvGeom::new(2, 2, 4, 2, 1)),
            ("conv-transpose k16 s8 p4", ConvGeom::new(2, 2, 16, 8, 4)),
        ]
        .into_iter()
        .map(|(name, g)| {
            let layer = Layer::ConvTranspose(random_convt(&mut rng, g));
            let x = uniform(&mut rng, shape);
            check_single_input(name, layer, x, &mut rng)
        })
        .collect(),
        LayerKind::Relu => {
            let x = away_from_zero(&mut rng, shape);
            vec![check_single_input("relu", Layer::Relu, x, &mut rng)]
        }
        LayerKind::MaxPool => {
            let x = separated(&mut rng, shape);
            vec![check_single_input("maxpool 2x2", Layer::MaxPool, x, &mut rng)]
        }
        LayerKind::ScoreFuse => vec![check_score_fuse(&mut rng, shape)],
    }
}

fn check_score_fuse(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> GradCheck {
    let layer = Layer::<f64>::ScoreFuse;
    let a = uniform(rng, shape);
    let b = uniform(rng, shape);
    let (y, cache) = layer.forward(&[&a, &b]).expect("forward");
    let r = uniform(rng, y.shape());
    let back = layer.backward(&cache, &r).expect("backward");
    let mut analytic = back.grad_inputs[0].data().to_vec();
    analytic.extend(back.grad_inputs[1].data());
    let mut av = a.data().to_vec();
    let mut num = numeric(&mut av, |v| {
        let at = Tensor::from_vec(shape, v.to_vec());
        dot(&layer.forward(&[&at, &b]).expect("forward").0, &r)
    });
    let mut bv = b.data().to_vec();
    num.extend(numeric(&mut bv, |v| {
        let bt = Tensor::from_vec(shape, v.to_vec());
        dot(&layer.forward(&[&a, &bt]).expect("forward").0, &r)
    }));
    GradCheck { name: "score fuse".into(), rel_error: rel_error(&analytic, &num), checked: num.len() }
}

/// Softmax cross-entropy on 1×2×4×4 logits with some ignored pixels.
pub fn check_loss(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 2, 4, 4];
    let logits = uniform(&mut rng, shape);
    let mut targets: Vec<MaskValue> = (0..16)
        .map(|_| match rng.random_range(0..5) {
            0 => MaskValue::Ignore,
            1 | 2 => MaskValue::Target,
            _ => MaskValue::Other,
        })
        .collect();
    targets[0] = MaskValue::Target;
    let out = softmax_cross_entropy(&logits, &targets).expect("loss");
    let mut v = logits.data().to_vec();
    let num =
        numeric(&mut v, |v| softmax_cross_entropy(&Tensor::from_vec(shape, v.to_vec()), &targets).expect("loss").loss);
    GradCheck { name: "softmax cross-entropy".into(), rel_error: rel_error(out.grad.data(), &num), checked: num.len() }
}

/// Every layer kind plus the loss for one seed.
pub fn check_all(seed: u64) -> Vec<GradCheck> {
    let mut out = Vec::new();
    for kind in [LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool, LayerKind::ConvTranspose, LayerKind::ScoreFuse] {
        out.extend(check_layer(kind, seed));
    }
    out.push(check_loss(seed));
    out
}
