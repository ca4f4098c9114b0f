use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labels::MaskValue;
use crate::net::{softmax_cross_entropy, Fcn8Model, NetError, ParamGrads, Tensor};
use crate::raster::Plane;

use super::dataset::{to_input, TrainingSet};
use super::{Divergence, TrainConfig, TrainError};

/// Batches prepared ahead of the optimizer.
const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Fcn8Model,
    /// Pixel-weighted mean loss of each epoch.
    pub losses: Vec<f64>,
}

struct Batch {
    input: Tensor,
    targets: Vec<MaskValue>,
}

fn make_batch(set: &TrainingSet<'_>, ids: &[usize]) -> Result<Batch, TrainError> {
    let samples = ids.iter().map(|&i| set.get(i)).collect::<Result<Vec<_>, _>>()?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let targets = samples.iter().flat_map(|s| s.mask.pixels().iter().copied()).collect();
    Ok(Batch { input: to_input(&images), targets })
}

/// Plain minibatch SGD. Sample order is reshuffled every epoch from one
/// seeded generator; a producer thread assembles batches while the
/// optimizer runs, in the same order a sequential loop would.
pub fn train(mut model: Fcn8Model, set: &TrainingSet<'_>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        let (tx, rx) = sync_channel::<Result<Batch, TrainError>>(QUEUE_DEPTH);
        let mut weighted = 0.0f64;
        let mut pixels = 0usize;
        let result = std::thread::scope(|s| {
            // Owned here so an early return unblocks the producer.
            let rx = rx;
            let order = &order;
            s.spawn(move || {
                for ids in order.chunks(cfg.batch_size) {
                    let b = make_batch(set, ids);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        break;
                    }
                }
            });
            for (bi, batch) in rx.iter().enumerate() {
                let batch = batch?;
                let (logits, tape) = model.forward_train(&batch.input)?;
                let out = match softmax_cross_entropy(&logits, &batch.targets) {
                    Ok(o) => o,
                    Err(NetError::AllPixelsIgnored) => continue,
                    Err(e) => return Err(e.into()),
                };
                if !out.loss.is_finite() || !out.grad.is_finite() {
                    return Err(diverged(epoch, bi, &model, &losses));
                }
                let (grads, _) = model.backward(&tape, &out.grad)?;
                if !step_stays_finite(&model, &grads, cfg.learning_rate) {
                    return Err(diverged(epoch, bi, &model, &losses));
                }
                model.sgd_step(&grads, cfg.learning_rate);
                weighted += out.loss * out.counted as f64;
                pixels += out.counted;
            }
            Ok(())
        });
        result?;
        if pixels == 0 {
            return Err(TrainError::NoLabelledPixels);
        }
        let loss = weighted / pixels as f64;
        log::info!("epoch {}/{}: loss {loss:.6}", epoch + 1, cfg.epochs);
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}

/// True when the gradients and the parameters after `p - lr·g` are all
/// finite; checked before the update so the current model stays usable.
fn step_stays_finite(model: &Fcn8Model, grads: &[ParamGrads<f32>], lr: f64) -> bool {
    let lr = lr as f32;
    model.params().iter().zip(grads).all(|((_, p), g)| {
        p.weight
            .iter()
            .zip(&g.weight)
            .chain(p.bias.iter().zip(&g.bias))
            .all(|(&w, &d)| d.is_finite() && (w - lr * d).is_finite())
    })
}

fn diverged(epoch: usize, batch: usize, model: &Fcn8Model, losses: &[f64]) -> TrainError {
    TrainError::Diverged(Box::new(Divergence { epoch, batch, last_good: model.clone(), losses: losses.to_vec() }))
}
