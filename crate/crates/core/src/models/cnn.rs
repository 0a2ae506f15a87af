use super::nn::{self, BatchStats, BnCache, Dims, Grads, ParamStore};
use super::{mspe, positive_output, ModelData, ModelError, ModelKind, Network};

/// Width of the latent vector fed to the regression head.
pub const LATENT: usize = 128;
const WIDTHS: [usize; 3] = [16, 32, 64];
const POOL_OUT: usize = 2;
const FLAT: usize = 64 * POOL_OUT * POOL_OUT;

// Slots: five per block (conv.w, bn.gamma, bn.beta, bn.mean, bn.var), then the trunk head.
const PER_BLOCK: usize = 5;
const FC_W: usize = 3 * PER_BLOCK;
const FC_B: usize = FC_W + 1;
const HEAD_W: usize = FC_W + 2;
const HEAD_B: usize = FC_W + 3;
const SCALE: usize = FC_W + 4;

/// Three conv/batch-norm/max-pool/rectifier blocks, adaptive average pooling
/// to 2x2, an affine map to a 128-wide rectified latent and a softplus
/// regression head. With `feat_dim > 0` the head reads the latent
/// concatenated with the tabular features (CNN-Aggr).
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub store: ParamStore,
    pub input: Dims,
    pub feat_dim: usize,
}

struct Block {
    input: Vec<f64>,
    in_dims: Dims,
    conv_dims: Dims,
    bn: Option<BnCache>,
    arg: Vec<usize>,
    out: Vec<f64>,
    out_dims: Dims,
}

struct Forward {
    blocks: Vec<Block>,
    pooled: Vec<f64>,
    latent: Vec<f64>,
    head_in: Vec<f64>,
    z: Vec<f64>,
    stats: Vec<BatchStats>,
}

impl Cnn {
    /// `feat_dim = 0` builds the standalone Naive-CNN.
    pub fn new(input: Dims, feat_dim: usize, seed: u64, target_scale: f64) -> Self {
        let mut rng = nn::seeded_rng(seed, 2);
        let mut s = ParamStore::default();
        let mut c_in = input.c;
        for (k, &c) in WIDTHS.iter().enumerate() {
            let b = k + 1;
            s.add(&format!("conv{b}.w"), &[c, c_in, 3, 3], nn::he_normal(&mut rng, c * c_in * 9, c_in * 9), true);
            s.add(&format!("bn{b}.gamma"), &[c], vec![1.0; c], true);
            s.add(&format!("bn{b}.beta"), &[c], vec![0.0; c], true);
            s.add(&format!("bn{b}.running_mean"), &[c], vec![0.0; c], false);
            s.add(&format!("bn{b}.running_var"), &[c], vec![1.0; c], false);
            c_in = c;
        }
        s.add("fc1.w", &[LATENT, FLAT], nn::he_normal(&mut rng, LATENT * FLAT, FLAT), true);
        s.add("fc1.b", &[LATENT], vec![0.0; LATENT], true);
        let width = LATENT + feat_dim;
        let head: Vec<f64> = nn::he_normal(&mut rng, width, width).iter().map(|w| w * 0.1).collect();
        s.add("head.w", &[1, width], head, true);
        s.add("head.b", &[1], vec![(std::f64::consts::E - 1.0).ln()], true);
        s.add("target_scale", &[1], vec![target_scale], false);
        Self { store: s, input, feat_dim }
    }

    pub fn from_store(store: ParamStore, input: Dims) -> Self {
        let feat_dim = store.params[HEAD_W].shape[1] - LATENT;
        Self { store, input, feat_dim }
    }

    pub fn check_input(&self, data: &ModelData) -> Result<(), ModelError> {
        let mismatch = |got: String| ModelError::ShapeMismatch {
            expected: format!("{:?} + {} features", self.input, self.feat_dim),
            got,
        };
        if data.image_dims != Some(self.input) {
            return Err(mismatch(format!("{:?}", data.image_dims)));
        }
        if self.feat_dim > 0 && data.feat_dim != self.feat_dim {
            return Err(mismatch(format!("{} features", data.feat_dim)));
        }
        Ok(())
    }

    fn forward(&self, data: &ModelData, idx: &[usize], train: bool) -> Forward {
        let s = &self.store;
        let batch = idx.len();
        let mut x = data.image_batch(idx);
        let mut d = self.input;
        let mut blocks = Vec::with_capacity(3);
        let mut stats = Vec::new();
        for (k, &c) in WIDTHS.iter().enumerate() {
            let p = k * PER_BLOCK;
            let conv = nn::conv3x3_forward(&x, batch, d, s.get(p), c);
            let cd = Dims { c, h: d.h, w: d.w };
            let (normed, bn) = if train {
                let (y, cache, st) = nn::batchnorm_train(&conv, batch, cd, s.get(p + 1), s.get(p + 2));
                stats.push(st);
                (y, Some(cache))
            } else {
                (nn::batchnorm_eval(&conv, batch, cd, s.get(p + 1), s.get(p + 2), s.get(p + 3), s.get(p + 4)), None)
            };
            let (pooled, arg, od) = nn::maxpool2_forward(&normed, batch, cd);
            let out = nn::relu(&pooled);
            blocks.push(Block { input: x, in_dims: d, conv_dims: cd, bn, arg, out: out.clone(), out_dims: od });
            x = out;
            d = od;
        }
        let pooled = nn::adaptive_avg_forward(&x, batch, d, POOL_OUT);
        let latent = nn::relu(&nn::dense_forward(&pooled, batch, s.get(FC_W), s.get(FC_B), LATENT));
        let head_in = if self.feat_dim > 0 {
            let feats = data.feature_batch(idx);
            let mut v = Vec::with_capacity(batch * (LATENT + self.feat_dim));
            for b in 0..batch {
                v.extend_from_slice(&latent[b * LATENT..(b + 1) * LATENT]);
                v.extend_from_slice(&feats[b * self.feat_dim..(b + 1) * self.feat_dim]);
            }
            v
        } else {
            latent.clone()
        };
        let z = nn::dense_forward(&head_in, batch, s.get(HEAD_W), s.get(HEAD_B), 1);
        Forward { blocks, pooled, latent, head_in, z, stats }
    }

    /// Evaluation-mode latent vectors, `[idx.len(), 128]`.
    pub fn latent(&self, data: &ModelData, idx: &[usize]) -> Vec<f64> {
        self.forward(data, idx, false).latent
    }

    /// Copies the trunk and head of a Naive-CNN into a CNN-Aggr head with zero
    /// feature weights.
    pub fn aggr_from(naive: &Cnn, feat_dim: usize) -> Self {
        let mut store = naive.store.clone();
        let mut w = naive.store.get(HEAD_W).to_vec();
        w.resize(LATENT + feat_dim, 0.0);
        store.params[HEAD_W].shape = vec![1, LATENT + feat_dim];
        *store.get_mut(HEAD_W) = w;
        Self { store, input: naive.input, feat_dim }
    }
}

impl Network for Cnn {
    fn kind(&self) -> ModelKind {
        if self.feat_dim > 0 {
            ModelKind::CnnAggr
        } else {
            ModelKind::NaiveCnn
        }
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
        let f = self.forward(data, idx, true);
        let (pred, dpdz) = positive_output(&f.z, s.get(SCALE)[0]);
        let (loss, dpred) = mspe(&pred, &data.label_batch(idx));
        let dz: Vec<f64> = dpred.iter().zip(&dpdz).map(|(a, b)| a * b).collect();

        let (gw, gb) = nn::pair_mut(&mut grads.0, HEAD_W, HEAD_B);
        let dhead = nn::dense_backward(&f.head_in, &dz, batch, s.get(HEAD_W), 1, gw, gb);
        let width = LATENT + self.feat_dim;
        let dlatent: Vec<f64> = (0..batch).flat_map(|b| dhead[b * width..b * width + LATENT].iter().copied()).collect();
        let dh = nn::relu_backward(&f.latent, &dlatent);
        let (gw, gb) = nn::pair_mut(&mut grads.0, FC_W, FC_B);
        let dpooled = nn::dense_backward(&f.pooled, &dh, batch, s.get(FC_W), LATENT, gw, gb);
        let last = &f.blocks[2];
        let mut dx = nn::adaptive_avg_backward(&dpooled, batch, last.out_dims, POOL_OUT);
        for (k, blk) in f.blocks.iter().enumerate().rev() {
            let p = k * PER_BLOCK;
            let dpool = nn::relu_backward(&blk.out, &dx);
            let dnorm = nn::maxpool2_backward(&dpool, &blk.arg, batch * blk.conv_dims.len());
            let (gg, gbeta) = nn::pair_mut(&mut grads.0, p + 1, p + 2);
            let bn = blk.bn.as_ref().expect("training forward keeps batch-norm caches");
            let dconv = nn::batchnorm_backward(&dnorm, bn, batch, blk.conv_dims, s.get(p + 1), gg, gbeta);
            dx = nn::conv3x3_backward(
                &blk.input,
                &dconv,
                batch,
                blk.in_dims,
                s.get(p),
                blk.conv_dims.c,
                &mut grads.0[p],
            );
        }
        (loss, f.stats)
    }

    fn absorb_batch_stats(&mut self, stats: &[BatchStats]) {
        for (k, st) in stats.iter().enumerate() {
            let p = k * PER_BLOCK;
            let (lo, hi) = self.store.params.split_at_mut(p + 4);
            nn::update_running(&mut lo[p + 3].value, &mut hi[0].value, st);
        }
    }

    fn predict(&self, data: &ModelData, idx: &[usize]) -> Vec<f64> {
        let f = self.forward(data, idx, false);
        positive_output(&f.z, self.store.get(SCALE)[0]).0
    }
}
