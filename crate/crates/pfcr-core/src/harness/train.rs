use super::dataset::Dataset;
use super::HarnessError;
use crate::tensor::{cosine_lr, Adam, Tape, Tensor};
use crate::vit::{ModelState, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn batch_of(data: &Dataset, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let (c, h, w) = (data.images.shape[1], data.images.shape[2], data.images.shape[3]);
    let px = c * h * w;
    let mut imgs = Vec::with_capacity(indices.len() * px);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        imgs.extend_from_slice(&data.images.data[i * px..(i + 1) * px]);
        labels.push(data.labels[i]);
    }
    (Tensor::new(vec![indices.len(), c, h, w], imgs), labels)
}

/// Cross-entropy training of the full-precision model with Adam and cosine
/// annealing over the whole run. Returns the model and its eval top-1.
pub fn train_baseline(
    config: &ViTConfig,
    train: &Dataset,
    eval: &Dataset,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(ModelState<f32>, f64), HarnessError> {
    let mut model = ModelState::<f32>::init(config, seed)?;
    let keys: Vec<String> = model.params().map(|(n, _)| n.clone()).collect();
    let trainable: BTreeSet<String> = keys.iter().cloned().collect();
    let lens: Vec<usize> = keys.iter().map(|k| model.param(k).tensor.numel()).collect();
    let mut adam = Adam::new(&lens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));

    let steps_per_epoch = train.len().div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch).max(1);
    let mut step = 0usize;

    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let (images, labels) = batch_of(train, chunk);
            let mut tape = Tape::new();
            let img_id = tape.leaf(images);
            let mut sess = model.session(Some(&trainable));
            let logits = sess.forward_logits(&mut tape, img_id);
            let bindings = sess.bindings;
            let loss_id = tape.cross_entropy(logits, &labels);
            let loss = tape.scalar_value(loss_id);
            if !loss.is_finite() {
                return Err(HarnessError::Diverged(format!("loss became {loss} at step {step}")));
            }
            tape.backward(loss_id);
            let lr_t = cosine_lr(step.min(total_steps), total_steps, lr);
            for (slot, key) in keys.iter().enumerate() {
                let id = bindings
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, id)| *id)
                    .expect("parameter bound during forward");
                let grad = tape.grad(id).expect("gradient after backward").to_vec();
                adam.step(slot, model.trainable_slice_mut(key), &grad, lr_t);
            }
            step += 1;
        }
    }

    let acc = evaluate_top1(&model, eval);
    Ok((model, acc))
}

/// Fraction of samples whose argmax logit matches the label; ties resolve to
/// the lowest class index.
pub fn evaluate_top1(model: &ModelState<f32>, eval: &Dataset) -> f64 {
    assert!(!eval.is_empty(), "evaluate_top1: empty dataset");
    let classes = model.config.num_classes;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..eval.len()).collect();
    for chunk in all.chunks(64) {
        let (images, labels) = batch_of(eval, chunk);
        let logits = model.logits(&images);
        for (row, &label) in labels.iter().enumerate() {
            let scores = &logits.data[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    correct as f64 / eval.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{make_synthetic, Split};

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            in_channels: 1,
            mlp_ratio: 2.0,
            num_classes: 4,
        }
    }

    #[test]
    fn untrained_model_sits_near_chance() {
        let cfg = ViTConfig { num_classes: 10, ..tiny_config() };
        let model = ModelState::<f32>::init(&cfg, 3).unwrap();
        let mut eval = make_synthetic(10, 1000, 8, 11, 0.2);
        eval.split = Split::Eval;
        let acc = evaluate_top1(&model, &eval);
        assert!((acc - 0.10).abs() <= 0.05, "chance-level expected, got {acc}");
    }

    #[test]
    fn top1_is_scale_invariant_and_tie_breaks_low() {
        let cfg = tiny_config();
        let mut model = ModelState::<f32>::init(&cfg, 0).unwrap();
        // Zero head weights: logits equal the bias for every input.
        model.set_param_tensor("head.w", Tensor::zeros(vec![8, 4]));
        model.set_param_tensor("head.b", Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 0.0]));
        let mut ds = make_synthetic(4, 40, 8, 2, 0.2);
        ds.split = Split::Eval;
        // Constant prediction: ties between classes 1 and 2 resolve to 1.
        let acc = evaluate_top1(&model, &ds);
        let frac1 = ds.labels.iter().filter(|&&l| l == 1).count() as f64 / 40.0;
        assert_eq!(acc, frac1);

        // Positive rescaling must not change anything.
        model.set_param_tensor("head.b", Tensor::new(vec![4], vec![10.0, 30.0, 30.0, 0.0]));
        assert_eq!(evaluate_top1(&model, &ds), frac1);
    }

    #[test]
    fn short_training_is_deterministic_and_learns() {
        let cfg = tiny_config();
        let train = make_synthetic(4, 128, 8, 5, 0.05);
        let mut eval = make_synthetic(4, 128, 8, 6, 0.05);
        eval.split = Split::Eval;
        let (m1, a1) = train_baseline(&cfg, &train, &eval, 20, 2e-3, 32, 1).unwrap();
        let (m2, a2) = train_baseline(&cfg, &train, &eval, 20, 2e-3, 32, 1).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(a1, a2);
        assert!(a1 > 0.5, "4-class accuracy should be well above chance, got {a1}");
    }
}
