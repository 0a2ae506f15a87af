use super::nn::{self, BatchStats, Grads, ParamStore};
use super::{mspe, positive_output, ModelData, ModelKind, Network};

const HIDDEN: [usize; 2] = [128, 64];

/// Feature regressor `F -> 128 -> 64 -> 1`, rectifiers on the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub store: ParamStore,
    pub feat_dim: usize,
}

// Parameter slots in the store.
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;
const SCALE: usize = 6;

impl Mlp {
    pub fn new(feat_dim: usize, seed: u64, target_scale: f64) -> Self {
        let mut rng = nn::seeded_rng(seed, 1);
        let mut s = ParamStore::default();
        let [h1, h2] = HIDDEN;
        s.add("fc1.w", &[h1, feat_dim], nn::he_normal(&mut rng, h1 * feat_dim, feat_dim), true);
        s.add("fc1.b", &[h1], vec![0.0; h1], true);
        s.add("fc2.w", &[h2, h1], nn::he_normal(&mut rng, h2 * h1, h1), true);
        s.add("fc2.b", &[h2], vec![0.0; h2], true);
        let head: Vec<f64> = nn::he_normal(&mut rng, h2, h2).iter().map(|w| w * 0.1).collect();
        s.add("head.w", &[1, h2], head, true);
        s.add("head.b", &[1], vec![(std::f64::consts::E - 1.0).ln()], true);
        s.add("target_scale", &[1], vec![target_scale], false);
        Self { store: s, feat_dim }
    }

    pub fn from_store(store: ParamStore) -> Self {
        let feat_dim = store.params[W1].shape[1];
        Self { store, feat_dim }
    }

    fn forward(&self, x: &[f64], batch: usize) -> [Vec<f64>; 3] {
        let s = &self.store;
        let a1 = nn::relu(&nn::dense_forward(x, batch, s.get(W1), s.get(B1), HIDDEN[0]));
        let a2 = nn::relu(&nn::dense_forward(&a1, batch, s.get(W2), s.get(B2), HIDDEN[1]));
        let z = nn::dense_forward(&a2, batch, s.get(W3), s.get(B3), 1);
        [a1, a2, z]
    }
}

impl Network for Mlp {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_and_grad(&self, data: &ModelData, idx: &[usize], grads: &mut Grads) -> (f64, Vec<BatchStats>) {
        let s = &self.store;
        let batch = idx.len();
        let x = data.feature_batch(idx);
        let [a1, a2, z] = self.forward(&x, batch);
        let (pred, dpdz) = positive_output(&z, s.get(SCALE)[0]);
        let (loss, dpred) = mspe(&pred, &data.label_batch(idx));
        let dz: Vec<f64> = dpred.iter().zip(&dpdz).map(|(a, b)| a * b).collect();
        let (gw, gb) = nn::pair_mut(&mut grads.0, W3, B3);
        let da2 = nn::dense_backward(&a2, &dz, batch, s.get(W3), 1, gw, gb);
        let dh2 = nn::relu_backward(&a2, &da2);
        let (gw, gb) = nn::pair_mut(&mut grads.0, W2, B2);
        let da1 = nn::dense_backward(&a1, &dh2, batch, s.get(W2), HIDDEN[1], gw, gb);
        let dh1 = nn::relu_backward(&a1, &da1);
        let (gw, gb) = nn::pair_mut(&mut grads.0, W1, B1);
        nn::dense_backward(&x, &dh1, batch, s.get(W1), HIDDEN[0], gw, gb);
        (loss, Vec::new())
    }

    fn predict(&self, data: &ModelData, idx: &[usize]) -> Vec<f64> {
        let x = data.feature_batch(idx);
        let [_, _, z] = self.forward(&x, idx.len());
        positive_output(&z, self.store.get(SCALE)[0]).0
    }
}
