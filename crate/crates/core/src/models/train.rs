use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::seeded_rng;
use super::{ModelData, ModelError, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, epochs: 30, batch_size: 32, learning_rate: 1e-3, momentum: 0.9, patience: 5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmspe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_rmspe: f64,
    pub history: Vec<EpochStats>,
}

fn rmspe_positive(preds: &[f64], labels: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, y) in preds.iter().zip(labels) {
        if *y > 0.0 {
            s += ((p - y) / y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Predictions over `idx` in fixed-size chunks.
pub fn predict_all<N: Network + ?Sized>(net: &N, data: &ModelData, idx: &[usize]) -> Vec<f64> {
    idx.chunks(64).flat_map(|c| net.predict(data, c)).collect()
}

/// Momentum SGD on the mean squared percentage error with early stopping on
/// validation RMSPE. The weights of the best epoch are restored.
pub fn train<N: Network>(
    net: &mut N,
    data: &ModelData,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(ModelError::InvalidConfig("empty training split".into()));
    }
    let mut velocity: Vec<Vec<f64>> = net.store().params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut grads = net.store().zero_grads();
    let mut best = (f64::INFINITY, 0usize, net.store().clone());
    let mut history = Vec::new();
    let mut order = train_idx.to_vec();
    let val_labels = data.label_batch(val_idx);
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.copy_from_slice(train_idx);
        order.shuffle(&mut seeded_rng(cfg.seed, 100 + epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            grads.clear();
            let (loss, stats) = net.loss_and_grad(data, idx, &mut grads);
            if !loss.is_finite() || grads.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss { epoch, batch, loss });
            }
            net.absorb_batch_stats(&stats);
            for ((p, v), g) in net.store_mut().params.iter_mut().zip(&mut velocity).zip(&grads.0) {
                if !p.trainable {
                    continue;
                }
                for ((w, vel), gr) in p.value.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = cfg.momentum * *vel - cfg.learning_rate * gr;
                    *w += *vel;
                }
            }
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_rmspe = if val_idx.is_empty() {
            train_loss.sqrt()
        } else {
            rmspe_positive(&predict_all(net, data, val_idx), &val_labels)
        };
        if !val_rmspe.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, batch: batches, loss: val_rmspe });
        }
        log::debug!("epoch {epoch}: train mspe {train_loss:.6}, val rmspe {val_rmspe:.6}");
        history.push(EpochStats { epoch, train_loss, val_rmspe });
        if val_rmspe < best.0 {
            best = (val_rmspe, epoch, net.store().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *net.store_mut() = best.2;
    Ok(TrainReport { best_epoch: best.1, best_val_rmspe: best.0, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name of the parameter with the largest error.
    pub worst: String,
}

/// Compares analytic gradients with central differences (step `1e-5`) on
/// `per_tensor` random coordinates of every trainable tensor. Relative
/// error is `|a - n| / max(|a|, |n|, 1e-6)`. The step shrinks up to
/// a hundredfold while it straddles a kink.
pub fn gradient_check<N: Network + Clone>(
    net: &N,
    data: &ModelData,
    idx: &[usize],
    per_tensor: usize,
    seed: u64,
) -> GradCheck {
    const H: f64 = 1e-5;
    let mut grads = net.store().zero_grads();
    net.loss_and_grad(data, idx, &mut grads);
    let mut rng = seeded_rng(seed, 7);
    let mut probe = net.clone();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, worst: String::new() };
    for t in 0..net.store().params.len() {
        let p = &net.store().params[t];
        if !p.trainable {
            continue;
        }
        for _ in 0..per_tensor.min(p.value.len()) {
            let i = rng.random_range(0..p.value.len());
            let orig = p.value[i];
            let mut loss_at = |v: f64| {
                probe.store_mut().params[t].value[i] = v;
                let mut scratch = probe.store().zero_grads();
                probe.loss_and_grad(data, idx, &mut scratch).0
            };
            let center = loss_at(orig);
            let mut h = H;
            let numeric = loop {
                let (up, down) = (loss_at(orig + h), loss_at(orig - h));
                let (fwd, bwd) = ((up - center) / h, (center - down) / h);
                // One-sided slopes that disagree mean a ReLU or max-pool kink lies inside the stencil.
                let kink = (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-6);
                if !kink || h <= H * 1e-2 {
                    break (up - down) / (2.0 * h);
                }
                h *= 0.1;
            };
            probe.store_mut().params[t].value[i] = orig;
            let analytic = grads.0[t][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", p.name);
            }
            out.checked += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::nn::{he_normal, seeded_rng, Dims};
    use crate::models::{Cnn, Mlp, LATENT};

    fn noise_data(n: usize, feat_dim: usize, image: Option<Dims>, seed: u64) -> ModelData {
        let mut rng = seeded_rng(seed, 0);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let images = image.map_or(Vec::new(), |d| (0..n * d.len()).map(|_| rng.random_range(0.0f32..1.0)).collect());
        ModelData { image_dims: image, images, feat_dim, features: he_normal(&mut rng, n * feat_dim, 2), labels }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let data = noise_data(5, 12, None, 1);
        let net = Mlp::new(12, 3, 1.0);
        let check = gradient_check(&net, &data, &[0, 1, 2, 3, 4], 20, 9);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let d = Dims { c: 3, h: 8, w: 8 };
        let data = noise_data(4, 6, Some(d), 2);
        for net in [Cnn::new(d, 0, 4, 1.0), Cnn::new(d, 6, 5, 1.0)] {
            let check = gradient_check(&net, &data, &[0, 1, 2, 3], 12, 10);
            assert!(check.max_rel_error < 1e-4, "{check:?}");
        }
    }

    #[test]
    fn mlp_fits_a_constant() {
        let mut data = noise_data(200, 8, None, 3);
        data.labels.iter_mut().for_each(|y| *y = 0.004);
        let all: Vec<usize> = (0..200).collect();
        let mut net = Mlp::new(8, 1, data.target_scale(&all));
        let cfg = TrainConfig { epochs: 60, learning_rate: 1e-2, patience: 60, ..Default::default() };
        let report = train(&mut net, &data, &all[..150], &all[150..], &cfg).unwrap();
        let preds = predict_all(&net, &data, &all[..150]);
        let err = rmspe_positive(&preds, &data.labels[..150]);
        assert!(err < 1e-2, "{err} {:?}", report.history.last());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = noise_data(64, 8, None, 4);
        let all: Vec<usize> = (0..64).collect();
        let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 42, ..Default::default() };
        let run = || {
            let mut net = Mlp::new(8, 7, 1.0);
            train(&mut net, &data, &all[..48], &all[48..], &cfg).unwrap();
            net.store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_image_gives_softplus_of_bias() {
        let d = Dims { c: 3, h: 8, w: 8 };
        let mut net = Cnn::new(d, 0, 1, 1.0);
        let head = net.store.index_of("head.w").unwrap();
        net.store.get_mut(head).iter_mut().for_each(|w| *w = 0.0);
        let bias = net.store.get(net.store.index_of("head.b").unwrap())[0];
        let data =
            ModelData { image_dims: Some(d), images: vec![0.0; d.len()], labels: vec![1.0], ..Default::default() };
        let p = net.predict(&data, &[0]);
        assert_eq!(p[0], crate::models::nn::softplus(bias));
        assert_eq!(net.latent(&data, &[0]).len(), LATENT);
    }

    #[test]
    fn latent_width_is_resolution_independent() {
        for side in [8, 13, 60] {
            let d = Dims { c: 3, h: side, w: side };
            let data = noise_data(2, 0, Some(d), 6);
            assert_eq!(Cnn::new(d, 0, 1, 1.0).latent(&data, &[0, 1]).len(), 2 * LATENT);
        }
    }

    #[test]
    fn aggr_with_zero_feature_weights_matches_naive_cnn() {
        let d = Dims { c: 3, h: 8, w: 8 };
        let data = noise_data(3, 5, Some(d), 7);
        let naive = Cnn::new(d, 0, 3, 1.0);
        let aggr = Cnn::aggr_from(&naive, 5);
        assert_eq!(naive.predict(&data, &[0, 1, 2]), aggr.predict(&data, &[0, 1, 2]));
    }

    #[test]
    fn aggr_feature_gradient_is_affine() {
        let d = Dims { c: 3, h: 8, w: 8 };
        let data = noise_data(4, 5, Some(d), 8);
        let mut net = Cnn::new(d, 5, 3, 1.0);
        // Zero the image branch so the head sees only the features.
        let fc = net.store.index_of("fc1.w").unwrap();
        net.store.get_mut(fc).iter_mut().for_each(|w| *w = 0.0);
        let idx = [0, 1, 2, 3];
        let mut grads = net.store.zero_grads();
        net.loss_and_grad(&data, &idx, &mut grads);
        let head = net.store.index_of("head.w").unwrap();
        let w = net.store.get(head).to_vec();
        let b = net.store.get(head + 1)[0];
        let feats = data.feature_batch(&idx);
        let mut expected = [0.0; 5];
        let n = idx.len() as f64;
        for (k, &i) in idx.iter().enumerate() {
            let x = &feats[k * 5..(k + 1) * 5];
            let z: f64 = b + x.iter().zip(&w[LATENT..]).map(|(a, c)| a * c).sum::<f64>();
            let y = data.labels[i];
            let pred = crate::models::nn::softplus(z);
            let dz = 2.0 * (pred - y) / (y * y * n) * crate::models::nn::sigmoid(z);
            for j in 0..5 {
                expected[j] += dz * x[j];
            }
        }
        for j in 0..5 {
            assert!((grads.0[head][LATENT + j] - expected[j]).abs() < 1e-12);
        }
        assert!(grads.0[head][..LATENT].iter().all(|&g| g == 0.0));
    }
}
