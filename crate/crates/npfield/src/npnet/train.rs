//! Mini-batch training of the potential model.
//!
//! The objective is `mean[(head - target/scale)^2] + lambda_recon * CE` where
//! CE is the mean reconstruction cross-entropy over the distinct maps of the
//! batch. Optimized by gradient descent with momentum and a cosine-decayed
//! learning rate.
//!
//! Determinism: shuffling and initialization derive from the seed, and batch
//! gradients are accumulated over fixed-size sample chunks reduced in chunk
//! order, so results are byte-identical for any worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::field::Sample;
use crate::gridmap::{Footprint, OccupancyGrid};

use super::{
    decoder_backward_with, decoder_forward, encoder_backward, encoder_forward, head_backward,
    head_forward, layers::bce_with_logits, layers::bce_with_logits_backward, pose_features,
    MapFrame, NetError, PotentialModel,
};

/// Fixed accumulation chunk; gradients are reduced chunk-by-chunk in order.
const CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct HyperParams {
    /// Peak learning rate; ramps up over `warmup_epochs`, then cosine-decays.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Linear warmup keeps the early steps from blowing up the encoders.
    pub warmup_epochs: usize,
    pub lambda_recon: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Roughly 1-in-`val_every` samples (chosen by index hash, so stratified
    /// datasets stay represented) are held out; 0 disables the split.
    pub val_every: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 0.04,
            batch: 64,
            epochs: 50,
            warmup_epochs: 10,
            lambda_recon: 0.1,
            momentum: 0.9,
            seed: 0,
            val_every: 10,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-epoch losses. MSE values are in raw potential units (scale^2 times the
/// normalized training loss) so they compare directly with target variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: u64,
    pub train_mse: f64,
    pub train_recon: f64,
    pub val_mse: f64,
}

/// Rasterized inputs resolved by id, shared across the whole run.
pub struct TrainContext {
    map_ids: Vec<u32>,
    map_images: Vec<Vec<f64>>,
    map_frames: Vec<MapFrame>,
    fp_ids: Vec<u32>,
    fp_images: Vec<Vec<f64>>,
}

impl TrainContext {
    pub fn new(
        model: &PotentialModel,
        maps: &[(u32, OccupancyGrid)],
        footprints: &[(u32, Footprint)],
    ) -> Result<Self, NetError> {
        let mut ctx = Self {
            map_ids: Vec::new(),
            map_images: Vec::new(),
            map_frames: Vec::new(),
            fp_ids: Vec::new(),
            fp_images: Vec::new(),
        };
        for (id, map) in maps {
            ctx.map_ids.push(*id);
            ctx.map_images.push(model.map_image(map)?);
            ctx.map_frames.push(MapFrame::of(map));
        }
        for (id, fp) in footprints {
            ctx.fp_ids.push(*id);
            ctx.fp_images.push(model.footprint_image(fp)?);
        }
        Ok(ctx)
    }

    fn map_index(&self, id: u32) -> Result<usize, NetError> {
        self.map_ids
            .iter()
            .position(|&m| m == id)
            .ok_or(NetError::UnresolvedId { kind: "map", id })
    }

    fn fp_index(&self, id: u32) -> Result<usize, NetError> {
        self.fp_ids
            .iter()
            .position(|&m| m == id)
            .ok_or(NetError::UnresolvedId { kind: "footprint", id })
    }

    fn check_dataset(&self, dataset: &[Sample]) -> Result<(), NetError> {
        for s in dataset {
            self.map_index(s.map_id)?;
            self.fp_index(s.footprint_id)?;
        }
        Ok(())
    }
}

/// Loss and full-parameter gradient of one batch at the current weights.
/// Returns `(mse_normalized, recon_ce, gradient)`.
pub fn batch_loss_and_grad(
    model: &PotentialModel,
    ctx: &TrainContext,
    batch: &[Sample],
    lambda_recon: f64,
) -> Result<(f64, f64, Vec<f64>), NetError> {
    let layout = model.layout();
    let act = model.config().activation;
    let scale = model.config().potential_scale;
    let params = model.params();
    let region_start = layout.head_region_start();
    let region_len = layout.total_params() - region_start;

    // distinct maps and footprints in first-occurrence order
    let mut map_idx = Vec::new();
    let mut fp_idx = Vec::new();
    for s in batch {
        let mi = ctx.map_index(s.map_id)?;
        if !map_idx.contains(&mi) {
            map_idx.push(mi);
        }
        let fi = ctx.fp_index(s.footprint_id)?;
        if !fp_idx.contains(&fi) {
            fp_idx.push(fi);
        }
    }

    // distinct encoder passes are independent; run them in parallel
    let (map_encs, fp_encs): (Vec<_>, Vec<_>) = rayon::join(
        || {
            map_idx
                .par_iter()
                .map(|&mi| encoder_forward(params, layout, &layout.map_enc, &ctx.map_images[mi], act))
                .collect()
        },
        || {
            fp_idx
                .par_iter()
                .map(|&fi| encoder_forward(params, layout, &layout.fp_enc, &ctx.fp_images[fi], act))
                .collect()
        },
    );

    struct ChunkAcc {
        head_grad: Vec<f64>,
        d_emaps: Vec<Vec<f64>>,
        d_efps: Vec<Vec<f64>>,
        mse: f64,
    }

    let n = batch.len() as f64;
    let chunks: Vec<ChunkAcc> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkAcc {
                head_grad: vec![0.0; region_len],
                d_emaps: map_idx.iter().map(|_| vec![0.0; model.config().embed_map]).collect(),
                d_efps: fp_idx.iter().map(|_| vec![0.0; model.config().embed_fp]).collect(),
                mse: 0.0,
            };
            for s in chunk {
                let mi = map_idx.iter().position(|&m| ctx.map_ids[m] == s.map_id).unwrap();
                let fi = fp_idx.iter().position(|&f| ctx.fp_ids[f] == s.footprint_id).unwrap();
                let e_map = &map_encs[mi].0;
                let e_fp = &fp_encs[fi].0;
                let feats = pose_features(s.pose, ctx.map_frames[map_idx[mi]]);
                let (h, cache) = head_forward(params, layout, e_map, e_fp, &feats, act);
                let err = h - s.target / scale;
                acc.mse += err * err;
                let d_out = 2.0 * err / n;
                head_backward(
                    params,
                    layout,
                    &cache,
                    d_out,
                    act,
                    &mut acc.head_grad,
                    region_start,
                    &mut acc.d_emaps[mi],
                    &mut acc.d_efps[fi],
                );
            }
            acc
        })
        .collect();

    let mut grad = vec![0.0; layout.total_params()];
    let mut d_emaps: Vec<Vec<f64>> = map_idx.iter().map(|_| vec![0.0; model.config().embed_map]).collect();
    let mut d_efps: Vec<Vec<f64>> = fp_idx.iter().map(|_| vec![0.0; model.config().embed_fp]).collect();
    let mut mse_sum = 0.0;
    for c in &chunks {
        for (dst, src) in grad[region_start..].iter_mut().zip(&c.head_grad) {
            *dst += src;
        }
        for (dst, src) in d_emaps.iter_mut().zip(&c.d_emaps) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        for (dst, src) in d_efps.iter_mut().zip(&c.d_efps) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        mse_sum += c.mse;
    }

    // reconstruction loss per distinct map
    let mut recon_total = 0.0;
    if lambda_recon > 0.0 {
        let coeff = lambda_recon / map_idx.len() as f64;
        for (pos, &mi) in map_idx.iter().enumerate() {
            let e_map = &map_encs[pos].0;
            let (logits, dec_cache) = decoder_forward(params, layout, e_map, act);
            recon_total += bce_with_logits(&logits, &ctx.map_images[mi]);
            let mut d_logits = vec![0.0; logits.len()];
            bce_with_logits_backward(&logits, &ctx.map_images[mi], coeff, &mut d_logits);
            decoder_backward_with(params, layout, &dec_cache, e_map, &d_logits, act, &mut grad, &mut d_emaps[pos]);
        }
        recon_total /= map_idx.len() as f64;
    }

    // encoder backward with the accumulated embedding gradients; each pass
    // gets its own buffer so they can run in parallel, reduced in order
    let enc_grads: Vec<Vec<f64>> = map_idx
        .par_iter()
        .enumerate()
        .map(|(pos, _)| {
            let mut g = vec![0.0; layout.total_params()];
            encoder_backward(params, layout, &layout.map_enc, &map_encs[pos].1, &d_emaps[pos], act, &mut g);
            g
        })
        .chain(fp_idx.par_iter().enumerate().map(|(pos, _)| {
            let mut g = vec![0.0; layout.total_params()];
            encoder_backward(params, layout, &layout.fp_enc, &fp_encs[pos].1, &d_efps[pos], act, &mut g);
            g
        }))
        .collect();
    for g in &enc_grads {
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    Ok((mse_sum / n, recon_total, grad))
}

/// Forward-only mean squared error over samples, in normalized units.
fn eval_mse(model: &PotentialModel, ctx: &TrainContext, samples: &[Sample]) -> Result<f64, NetError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let layout = model.layout();
    let act = model.config().activation;
    let scale = model.config().potential_scale;
    let params = model.params();

    let mut map_cache: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut fp_cache: Vec<(usize, Vec<f64>)> = Vec::new();
    for s in samples {
        let mi = ctx.map_index(s.map_id)?;
        if !map_cache.iter().any(|(i, _)| *i == mi) {
            let (e, _) = encoder_forward(params, layout, &layout.map_enc, &ctx.map_images[mi], act);
            map_cache.push((mi, e));
        }
        let fi = ctx.fp_index(s.footprint_id)?;
        if !fp_cache.iter().any(|(i, _)| *i == fi) {
            let (e, _) = encoder_forward(params, layout, &layout.fp_enc, &ctx.fp_images[fi], act);
            fp_cache.push((fi, e));
        }
    }

    let sums: Vec<f64> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for s in chunk {
                let mi = ctx.map_index(s.map_id).unwrap();
                let fi = ctx.fp_index(s.footprint_id).unwrap();
                let e_map = &map_cache.iter().find(|(i, _)| *i == mi).unwrap().1;
                let e_fp = &fp_cache.iter().find(|(i, _)| *i == fi).unwrap().1;
                let feats = pose_features(s.pose, ctx.map_frames[mi]);
                let (h, _) = head_forward(params, layout, e_map, e_fp, &feats, act);
                let err = h - s.target / scale;
                sum += err * err;
            }
            sum
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

/// Train in place. Returns per-epoch losses; the epoch indices continue from
/// `config.epochs_trained`, so resumed runs produce a monotone history.
pub fn train(
    model: &mut PotentialModel,
    dataset: &[Sample],
    maps: &[(u32, OccupancyGrid)],
    footprints: &[(u32, Footprint)],
    hyper: &HyperParams,
) -> Result<Vec<EpochLoss>, NetError> {
    assert!(!dataset.is_empty(), "dataset must be nonempty");
    let ctx = TrainContext::new(model, maps, footprints)?;
    ctx.check_dataset(dataset)?;

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for i in 0..dataset.len() {
        // index-hash split: immune to any periodic ordering of the dataset
        if hyper.val_every > 0 && mix64(i as u64) % hyper.val_every as u64 == 0 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset[i]).collect();

    let scale = model.config().potential_scale;
    let mut velocity = vec![0.0; model.params().len()];
    let mut history = Vec::with_capacity(hyper.epochs);
    let epoch_base = model.config().epochs_trained;

    for epoch in 0..hyper.epochs {
        let lr = if epoch < hyper.warmup_epochs {
            hyper.lr * (epoch + 1) as f64 / hyper.warmup_epochs as f64
        } else if hyper.epochs > hyper.warmup_epochs {
            let progress =
                (epoch - hyper.warmup_epochs) as f64 / (hyper.epochs - hyper.warmup_epochs) as f64;
            hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            hyper.lr
        };

        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ (epoch_base + epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut mse_acc = 0.0;
        let mut recon_acc = 0.0;
        let mut batches = 0usize;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(hyper.batch.max(1)).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset[i]).collect();
            let (mse, recon, grad) = batch_loss_and_grad(model, &ctx, &batch, hyper.lambda_recon)?;
            if !mse.is_finite() || !recon.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, batch: batch_no });
            }
            mse_acc += mse * batch.len() as f64;
            recon_acc += recon;
            batches += 1;
            seen += batch.len();

            let params = model.params_mut();
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = hyper.momentum * *v - lr * g;
                *p += *v;
            }
        }

        let val_mse = eval_mse(model, &ctx, &val_set)?;
        history.push(EpochLoss {
            epoch: epoch_base + epoch as u64,
            train_mse: mse_acc / seen.max(1) as f64 * scale * scale,
            train_recon: recon_acc / batches.max(1) as f64,
            val_mse: val_mse * scale * scale,
        });
    }
    model.config_mut().epochs_trained = epoch_base + hyper.epochs as u64;
    Ok(history)
}
