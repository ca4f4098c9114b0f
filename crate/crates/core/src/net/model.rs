//! FCN-8 over a VGG-16 encoder.
//!
//! ```text
//! input ─ block1 ─ block2 ─ block3 ─┬─ block4 ─┬─ block5 ─ fc6 ─ fc7 ─ score_fr ─ up×2 ─┐
//!                            (pool3) │   (pool4) │                                      (+)─ up×2 ─┐
//!                                    │           └─ score_pool4 ─────────────────────────┘         (+)─ up×8 ─ logits
//!                                    └─ score_pool3 ───────────────────────────────────────────────┘
//! ```

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::relu_apply;
use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, score_fuse_backward, score_fuse_forward, Cache,
    Conv2d, ConvGeom, ConvTranspose2d, Param, ParamGrads,
};
use super::tensor::{Scalar, Tensor};
use super::NetError;

/// Target and other.
pub const NUM_CLASSES: usize = 2;

/// Total downsampling of the encoder; input sides must be multiples of it.
pub const STRIDE: usize = 32;

const VGG16_BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
const HEAD_WIDTH: usize = 4096;

/// Channel-width scaling of the whole network: 1, 1/2, 1/4, 1/8 or 1/16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WidthMultiplier {
    divisor: u32,
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { divisor: 1 };
    pub const SIXTEENTH: WidthMultiplier = WidthMultiplier { divisor: 16 };

    pub fn from_divisor(divisor: u32) -> Result<Self, NetError> {
        match divisor {
            1 | 2 | 4 | 8 | 16 => Ok(Self { divisor }),
            _ => Err(NetError::BadWidth(1.0 / divisor as f64)),
        }
    }

    pub fn divisor(self) -> u32 {
        self.divisor
    }

    pub fn value(self) -> f64 {
        1.0 / self.divisor as f64
    }

    fn scale(self, channels: usize) -> usize {
        (channels / self.divisor as usize).max(1)
    }
}

impl Default for WidthMultiplier {
    fn default() -> Self {
        Self::FULL
    }
}

impl TryFrom<f64> for WidthMultiplier {
    type Error = NetError;

    fn try_from(v: f64) -> Result<Self, NetError> {
        if !v.is_finite() || v <= 0.0 {
            return Err(NetError::BadWidth(v));
        }
        let d = (1.0 / v).round();
        if (1.0 / d - v).abs() > 1e-9 {
            return Err(NetError::BadWidth(v));
        }
        Self::from_divisor(d as u32).map_err(|_| NetError::BadWidth(v))
    }
}

impl From<WidthMultiplier> for f64 {
    fn from(w: WidthMultiplier) -> f64 {
        w.value()
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.divisor == 1 {
            f.write_str("1")
        } else {
            write!(f, "1/{}", self.divisor)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fcn8Model<T = f32> {
    width: WidthMultiplier,
    encoder: Vec<Vec<Conv2d<T>>>,
    fc6: Conv2d<T>,
    fc7: Conv2d<T>,
    score_fr: Conv2d<T>,
    score_pool4: Conv2d<T>,
    score_pool3: Conv2d<T>,
    upscore2: ConvTranspose2d<T>,
    upscore_pool4: ConvTranspose2d<T>,
    upscore8: ConvTranspose2d<T>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape<T> {
    encoder: Vec<Vec<(Cache<T>, Cache<T>)>>,
    pools: Vec<Cache<T>>,
    pool_shapes: Vec<[usize; 4]>,
    fc6: (Cache<T>, Cache<T>),
    fc7: (Cache<T>, Cache<T>),
    score_fr: Cache<T>,
    upscore2: Cache<T>,
    score_pool4: Cache<T>,
    fuse4: Cache<T>,
    upscore_pool4: Cache<T>,
    score_pool3: Cache<T>,
    fuse3: Cache<T>,
    upscore8: Cache<T>,
}

impl<T> Tape<T> {
    /// Output shapes of pool1..pool5.
    pub fn pool_shapes(&self) -> &[[usize; 4]] {
        &self.pool_shapes
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), other.shape());
    acc.data_mut().iter_mut().zip(other.data()).for_each(|(a, &b)| *a += b);
}

impl<T: Scalar> Fcn8Model<T> {
    /// Architecture with every parameter zero and bilinear upsamplers.
    pub fn zeros(width: WidthMultiplier) -> Self {
        let mut in_ch = 3;
        let encoder = VGG16_BLOCKS
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|&c| {
                        let out = width.scale(c);
                        let conv = Conv2d::zeros(ConvGeom::new(in_ch, out, 3, 1, 1));
                        in_ch = out;
                        conv
                    })
                    .collect()
            })
            .collect();
        let pool3_ch = width.scale(256);
        let pool4_ch = width.scale(512);
        let head = width.scale(HEAD_WIDTH);
        Self {
            width,
            encoder,
            fc6: Conv2d::zeros(ConvGeom::new(in_ch, head, 7, 1, 3)),
            fc7: Conv2d::zeros(ConvGeom::new(head, head, 1, 1, 0)),
            score_fr: Conv2d::zeros(ConvGeom::new(head, NUM_CLASSES, 1, 1, 0)),
            score_pool4: Conv2d::zeros(ConvGeom::new(pool4_ch, NUM_CLASSES, 1, 1, 0)),
            score_pool3: Conv2d::zeros(ConvGeom::new(pool3_ch, NUM_CLASSES, 1, 1, 0)),
            upscore2: ConvTranspose2d::bilinear(NUM_CLASSES, 4, 2, 1),
            upscore_pool4: ConvTranspose2d::bilinear(NUM_CLASSES, 4, 2, 1),
            upscore8: ConvTranspose2d::bilinear(NUM_CLASSES, 16, 8, 4),
        }
    }

    /// He-normal encoder and head, zero score layers, bilinear upsamplers.
    pub fn init(seed: u64, width: WidthMultiplier) -> Self {
        let mut model = Self::zeros(width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |conv: &mut Conv2d<T>| {
            let g = conv.geom;
            let std = (2.0 / (g.in_ch * g.kernel * g.kernel) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in conv.param.weight.iter_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
            conv.param.touch();
        };
        for conv in model.encoder.iter_mut().flatten() {
            he(conv);
        }
        he(&mut model.fc6);
        he(&mut model.fc7);
        model
    }

    pub fn width(&self) -> WidthMultiplier {
        self.width
    }

    /// Parameter layers with stable names, in optimizer/checkpoint order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::with_capacity(21);
        for (b, block) in self.encoder.iter().enumerate() {
            for (i, conv) in block.iter().enumerate() {
                out.push((format!("conv{}_{}", b + 1, i + 1), &conv.param));
            }
        }
        out.push(("fc6".into(), &self.fc6.param));
        out.push(("fc7".into(), &self.fc7.param));
        out.push(("score_fr".into(), &self.score_fr.param));
        out.push(("score_pool4".into(), &self.score_pool4.param));
        out.push(("score_pool3".into(), &self.score_pool3.param));
        out.push(("upscore2".into(), &self.upscore2.param));
        out.push(("upscore_pool4".into(), &self.upscore_pool4.param));
        out.push(("upscore8".into(), &self.upscore8.param));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::with_capacity(21);
        for (b, block) in self.encoder.iter_mut().enumerate() {
            for (i, conv) in block.iter_mut().enumerate() {
                out.push((format!("conv{}_{}", b + 1, i + 1), &mut conv.param));
            }
        }
        out.push(("fc6".into(), &mut self.fc6.param));
        out.push(("fc7".into(), &mut self.fc7.param));
        out.push(("score_fr".into(), &mut self.score_fr.param));
        out.push(("score_pool4".into(), &mut self.score_pool4.param));
        out.push(("score_pool3".into(), &mut self.score_pool3.param));
        out.push(("upscore2".into(), &mut self.upscore2.param));
        out.push(("upscore_pool4".into(), &mut self.upscore_pool4.param));
        out.push(("upscore8".into(), &mut self.upscore8.param));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Fcn8Model<U> {
        let mut out = Fcn8Model::<U>::zeros(self.width);
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<(), NetError> {
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(NetError::ShapeMismatch(format!(
                "expected (n, 3, h, w) with h and w multiples of {STRIDE}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference: logits of shape (n, 2, h, w).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.check_batch(x)?;
        let mut h = x.clone();
        let mut pool3 = None;
        let mut pool4 = None;
        for (b, block) in self.encoder.iter().enumerate() {
            for conv in block {
                h = relu_apply(&conv.apply(&h)?);
            }
            h = maxpool_forward(&h)?.0;
            match b {
                2 => pool3 = Some(h.clone()),
                3 => pool4 = Some(h.clone()),
                _ => {}
            }
        }
        let (pool3, pool4) = (pool3.expect("block 3"), pool4.expect("block 4"));
        h = relu_apply(&self.fc6.apply(&h)?);
        h = relu_apply(&self.fc7.apply(&h)?);
        h = self.upscore2.apply(&self.score_fr.apply(&h)?)?;
        add_into(&mut h, &self.score_pool4.apply(&pool4)?);
        h = self.upscore_pool4.apply(&h)?;
        add_into(&mut h, &self.score_pool3.apply(&pool3)?);
        self.upscore8.apply(&h)
    }

    /// Training forward pass that records a tape for `backward`.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>), NetError> {
        self.check_batch(x)?;
        let mut h = x.clone();
        let mut enc_caches = Vec::with_capacity(5);
        let mut pools = Vec::with_capacity(5);
        let mut pool_shapes = Vec::with_capacity(5);
        let mut pool3 = None;
        let mut pool4 = None;
        for (b, block) in self.encoder.iter().enumerate() {
            let mut caches = Vec::with_capacity(block.len());
            for conv in block {
                let (y, cc) = conv.forward(&h)?;
                let (y, rc) = relu_forward(&y);
                caches.push((cc, rc));
                h = y;
            }
            let (y, pc) = maxpool_forward(&h)?;
            h = y;
            enc_caches.push(caches);
            pools.push(pc);
            pool_shapes.push(h.shape());
            match b {
                2 => pool3 = Some(h.clone()),
                3 => pool4 = Some(h.clone()),
                _ => {}
            }
        }
        let (pool3, pool4) = (pool3.expect("block 3"), pool4.expect("block 4"));

        let (y, c6) = self.fc6.forward(&h)?;
        let (y, r6) = relu_forward(&y);
        let (y, c7) = self.fc7.forward(&y)?;
        let (y, r7) = relu_forward(&y);
        let (y, c_sfr) = self.score_fr.forward(&y)?;
        let (up2, c_up2) = self.upscore2.forward(&y)?;
        let (s4, c_sp4) = self.score_pool4.forward(&pool4)?;
        let (f4, c_f4) = score_fuse_forward(&up2, &s4)?;
        let (up4, c_up4) = self.upscore_pool4.forward(&f4)?;
        let (s3, c_sp3) = self.score_pool3.forward(&pool3)?;
        let (f3, c_f3) = score_fuse_forward(&up4, &s3)?;
        let (logits, c_up8) = self.upscore8.forward(&f3)?;

        let tape = Tape {
            encoder: enc_caches,
            pools,
            pool_shapes,
            fc6: (c6, r6),
            fc7: (c7, r7),
            score_fr: c_sfr,
            upscore2: c_up2,
            score_pool4: c_sp4,
            fuse4: c_f4,
            upscore_pool4: c_up4,
            score_pool3: c_sp3,
            fuse3: c_f3,
            upscore8: c_up8,
        };
        Ok((logits, tape))
    }

    /// Parameter gradients in `params()` order, plus the input gradient.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Vec<ParamGrads<T>>, Tensor<T>), NetError> {
        let (g, d_up8) = self.upscore8.backward(&tape.upscore8, grad_logits)?;
        let (g_up4, g_s3) = score_fuse_backward(&tape.fuse3, &g)?;
        let (mut skip3, d_sp3) = self.score_pool3.backward(&tape.score_pool3, &g_s3)?;
        let (g, d_up4) = self.upscore_pool4.backward(&tape.upscore_pool4, &g_up4)?;
        let (g_up2, g_s4) = score_fuse_backward(&tape.fuse4, &g)?;
        let (mut skip4, d_sp4) = self.score_pool4.backward(&tape.score_pool4, &g_s4)?;
        let (g, d_up2) = self.upscore2.backward(&tape.upscore2, &g_up2)?;
        let (g, d_sfr) = self.score_fr.backward(&tape.score_fr, &g)?;
        let g = relu_backward(&tape.fc7.1, &g)?;
        let (g, d_fc7) = self.fc7.backward(&tape.fc7.0, &g)?;
        let g = relu_backward(&tape.fc6.1, &g)?;
        let (mut g, d_fc6) = self.fc6.backward(&tape.fc6.0, &g)?;

        let mut enc_grads: Vec<Vec<ParamGrads<T>>> = vec![Vec::new(); self.encoder.len()];
        for b in (0..self.encoder.len()).rev() {
            match b {
                3 => add_into(&mut g, &std::mem::replace(&mut skip4, Tensor::zeros([0; 4]))),
                2 => add_into(&mut g, &std::mem::replace(&mut skip3, Tensor::zeros([0; 4]))),
                _ => {}
            }
            g = maxpool_backward(&tape.pools[b], &g)?;
            let block = &self.encoder[b];
            let mut grads = Vec::with_capacity(block.len());
            for (conv, (cc, rc)) in block.iter().zip(&tape.encoder[b]).rev() {
                g = relu_backward(rc, &g)?;
                let (gi, pg) = conv.backward(cc, &g)?;
                grads.push(pg);
                g = gi;
            }
            grads.reverse();
            enc_grads[b] = grads;
        }

        let mut all: Vec<ParamGrads<T>> = enc_grads.into_iter().flatten().collect();
        all.extend([d_fc6, d_fc7, d_sfr, d_sp4, d_sp3, d_up2, d_up4, d_up8]);
        Ok((all, g))
    }

    /// Plain gradient descent: `p -= lr · grad` for every parameter.
    pub fn sgd_step(&mut self, grads: &[ParamGrads<T>], lr: f64) {
        let lr = T::from_f64(lr);
        for ((_, param), grad) in self.params_mut().into_iter().zip(grads) {
            for (w, &g) in param.weight.iter_mut().zip(&grad.weight) {
                *w = *w - lr * g;
            }
            for (b, &g) in param.bias.iter_mut().zip(&grad.bias) {
                *b = *b - lr * g;
            }
            param.touch();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::MaskValue;
    use crate::net::loss::softmax_cross_entropy;

    fn input(n: usize, side: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec([n, 3, side, side], data)
    }

    #[test]
    fn width_multiplier_parsing() {
        assert_eq!(WidthMultiplier::try_from(0.0625).unwrap(), WidthMultiplier::SIXTEENTH);
        assert_eq!(WidthMultiplier::try_from(1.0).unwrap(), WidthMultiplier::FULL);
        assert!(WidthMultiplier::try_from(0.3).is_err());
        assert!(WidthMultiplier::try_from(1.0 / 32.0).is_err());
        assert!(WidthMultiplier::try_from(-1.0).is_err());
        assert_eq!(WidthMultiplier::SIXTEENTH.to_string(), "1/16");
    }

    #[test]
    fn reduced_width_shapes() {
        let m = Fcn8Model::<f32>::init(1, WidthMultiplier::SIXTEENTH);
        let (logits, tape) = m.forward_train(&input(1, 224, 0)).unwrap();
        assert_eq!(logits.shape(), [1, 2, 224, 224]);
        let spatial: Vec<usize> = tape.pool_shapes().iter().map(|s| s[2]).collect();
        assert_eq!(spatial, vec![112, 56, 28, 14, 7]);
        assert_eq!(tape.pool_shapes()[2][1], 16);
        assert_eq!(tape.pool_shapes()[4][1], 32);
    }

    #[test]
    fn rejects_bad_batches() {
        let m = Fcn8Model::<f32>::init(1, WidthMultiplier::SIXTEENTH);
        assert!(m.forward(&Tensor::zeros([1, 3, 224, 200])).is_err());
        assert!(m.forward(&Tensor::zeros([1, 1, 224, 224])).is_err());
        assert!(m.forward(&Tensor::zeros([0, 3, 224, 224])).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Fcn8Model::<f32>::init(9, WidthMultiplier::from_divisor(8).unwrap());
        let b = Fcn8Model::<f32>::init(9, WidthMultiplier::from_divisor(8).unwrap());
        let c = Fcn8Model::<f32>::init(10, WidthMultiplier::from_divisor(8).unwrap());
        let weights =
            |m: &Fcn8Model<f32>| -> Vec<Vec<f32>> { m.params().iter().map(|(_, p)| p.weight.clone()).collect() };
        assert_eq!(weights(&a), weights(&b));
        assert_ne!(weights(&a), weights(&c));
        assert_eq!(a.params().len(), 21);
    }

    #[test]
    fn zero_score_layers_give_zero_logits_and_ln2_loss() {
        let m = Fcn8Model::<f32>::init(3, WidthMultiplier::SIXTEENTH);
        let logits = m.forward(&input(2, 64, 5)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let targets = vec![MaskValue::Target; 2 * 64 * 64];
        let out = softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_items_are_independent() {
        let m = randomized(Fcn8Model::<f32>::init(4, WidthMultiplier::SIXTEENTH), 4);
        let one = input(1, 64, 7);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let pair = m.forward(&Tensor::from_vec([2, 3, 64, 64], two)).unwrap();
        let single = m.forward(&one).unwrap();
        assert_eq!(pair.item(0), single.data());
        assert_eq!(pair.item(1), single.data());
        let (train_logits, _) = m.forward_train(&one).unwrap();
        assert_eq!(train_logits, single);
    }

    /// Gives score layers non-zero values so gradients reach the encoder.
    fn randomized<T: Scalar>(mut m: Fcn8Model<T>, seed: u64) -> Fcn8Model<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for (name, p) in m.params_mut() {
            if name.starts_with("score") {
                p.weight.iter_mut().for_each(|w| *w = T::from_f64(normal.sample(&mut rng)));
                p.bias.iter_mut().for_each(|w| *w = T::from_f64(normal.sample(&mut rng)));
                p.touch();
            }
        }
        m
    }

    #[test]
    fn whole_model_gradient_spot_check() {
        use rand::Rng;
        let m = randomized(Fcn8Model::<f64>::init(11, WidthMultiplier::SIXTEENTH), 12);
        let x: Tensor<f64> = input(1, 32, 13).cast();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let targets: Vec<MaskValue> =
            (0..32 * 32).map(|_| if rng.random_bool(0.5) { MaskValue::Target } else { MaskValue::Other }).collect();
        let loss_of = |m: &Fcn8Model<f64>| softmax_cross_entropy(&m.forward(&x).unwrap(), &targets).unwrap().loss;
        let (logits, tape) = m.forward_train(&x).unwrap();
        let lo = softmax_cross_entropy(&logits, &targets).unwrap();
        let (grads, _) = m.backward(&tape, &lo.grad).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let step = 1e-6;
        for (li, name) in names.iter().enumerate() {
            let len = m.params()[li].1.weight.len();
            for probe in 0..3 {
                let wi = (probe * 7919 + li * 31) % len;
                let mut plus = m.clone();
                plus.params_mut()[li].1.weight[wi] += step;
                let mut minus = m.clone();
                minus.params_mut()[li].1.weight[wi] -= step;
                let (lp, l0, lm) = (loss_of(&plus), loss_of(&m), loss_of(&minus));
                let analytic = grads[li].weight[wi];
                let close = |numeric: f64| {
                    let scale = numeric.abs().max(analytic.abs()).max(1e-7);
                    (numeric - analytic).abs() / scale < 1e-3
                };
                // A probe may straddle a ReLU or pooling kink; then only one
                // side of it is smooth.
                let central = (lp - lm) / (2.0 * step);
                assert!(
                    close(central) || close((lp - l0) / step) || close((l0 - lm) / step),
                    "{name}[{wi}]: analytic {analytic} numeric {central}"
                );
            }
        }
    }

    #[test]
    fn small_sgd_step_decreases_loss() {
        let mut m = randomized(Fcn8Model::<f32>::init(21, WidthMultiplier::SIXTEENTH), 22);
        let x = input(1, 224, 23);
        let targets: Vec<MaskValue> =
            (0..224 * 224).map(|i| if (i % 224) < 112 { MaskValue::Target } else { MaskValue::Other }).collect();
        let (logits, tape) = m.forward_train(&x).unwrap();
        let before = softmax_cross_entropy(&logits, &targets).unwrap();
        let (grads, _) = m.backward(&tape, &before.grad).unwrap();
        m.sgd_step(&grads, 1e-4);
        let after = softmax_cross_entropy(&m.forward(&x).unwrap(), &targets).unwrap();
        assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    }

    #[test]
    fn stale_tape_after_update() {
        let mut m = Fcn8Model::<f32>::init(1, WidthMultiplier::SIXTEENTH);
        let x = input(1, 32, 1);
        let (logits, tape) = m.forward_train(&x).unwrap();
        let g = Tensor::zeros(logits.shape());
        let (grads, _) = m.backward(&tape, &g).unwrap();
        m.sgd_step(&grads, 0.1);
        assert!(matches!(m.backward(&tape, &g), Err(NetError::StaleCache(_))));
    }
}
