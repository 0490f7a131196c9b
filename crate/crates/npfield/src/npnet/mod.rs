//! Neural potential field at desk scale.
//!
//! The model has three parts that train jointly and run separately:
//! residual-convolution encoders (map and footprint) with an optional
//! self-attention block producing fixed-length embeddings, a reconstruction
//! decoder that keeps map embeddings informative, and the potential head that
//! maps (map embedding, footprint embedding, pose) to a scalar repulsive
//! potential. The head is smooth in the pose, and [`PotentialModel::np_function_grad`]
//! returns its exact reverse-mode pose gradient for the trajectory optimizer.
//!
//! Parameters live in one flat `f64` vector addressed through a [`Layout`] of
//! named tensors, which makes serialization, SGD updates, and whole-model
//! finite-difference checks one-liners.

mod io;
mod layers;
mod train;

pub use io::{load_model, read_model, save_model, write_model};
pub use layers::Activation;
pub use train::{batch_loss_and_grad, train, EpochLoss, HyperParams, TrainContext};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gridmap::{Footprint, OccupancyGrid, Pose};
use layers::{
    attention_backward, attention_forward, bce_with_logits, conv2d_backward, conv2d_forward,
    conv_out_size, linear_backward, linear_forward, upsample2_backward, upsample2_forward,
    AttentionCache, AttentionGrads, AttentionParams,
};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("map raster is {got}x{got2}, model expects {want}x{want}", got2 = got)]
    WrongRasterSize { got: usize, want: usize },
    #[error("footprint mask does not fit the {side}x{side} encoder canvas")]
    FootprintTooLarge { side: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("map embedding carries no frame; encode the map with this model first")]
    MissingFrame,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset references unknown {kind} id {id}")]
    UnresolvedId { kind: &'static str, id: u32 },
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and bookkeeping knobs. Field defaults mirror the desk-scale
/// architecture: 64x64 rasters, 256/64/32-dim embeddings, encoder channels
/// 8-16-32-64 with one self-attention block, head 256-128-1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub map_side: usize,
    pub embed_map: usize,
    pub embed_fp: usize,
    pub embed_pose: usize,
    pub attention: bool,
    pub attention_heads: usize,
    pub enc_channels: [usize; 4],
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Output scale: the head is trained on targets divided by `w1 * pi` and
    /// rescaled on inference.
    pub potential_scale: f64,
    pub epochs_trained: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            map_side: 64,
            embed_map: 256,
            embed_fp: 64,
            embed_pose: 32,
            attention: true,
            attention_heads: 1,
            enc_channels: [8, 16, 32, 64],
            head_widths: vec![256, 128],
            activation: Activation::Tanh,
            seed: 0,
            potential_scale: 15.0 * std::f64::consts::PI,
            epochs_trained: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.map_side < 16 || self.map_side % 16 != 0 {
            return Err(NetError::BadConfig(format!(
                "map_side must be a positive multiple of 16 (four stride-2 stages), got {}",
                self.map_side
            )));
        }
        for (name, v) in [
            ("embed_map", self.embed_map),
            ("embed_fp", self.embed_fp),
            ("embed_pose", self.embed_pose),
        ] {
            if v == 0 {
                return Err(NetError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        if self.enc_channels.iter().any(|&c| c == 0) || self.head_widths.iter().any(|&w| w == 0) {
            return Err(NetError::BadConfig("zero-width layer".into()));
        }
        if self.attention {
            if self.attention_heads == 0 {
                return Err(NetError::BadConfig("attention_heads must be >= 1".into()));
            }
            for d in [self.enc_channels[3], fp_channels(&self.enc_channels)[3]] {
                if d % self.attention_heads != 0 {
                    return Err(NetError::BadConfig(format!(
                        "token dim {d} not divisible by {} attention heads",
                        self.attention_heads
                    )));
                }
            }
        }
        if !(self.potential_scale > 0.0) {
            return Err(NetError::BadConfig("potential_scale must be > 0".into()));
        }
        Ok(())
    }
}

fn fp_channels(enc: &[usize; 4]) -> [usize; 4] {
    [enc[0].div_ceil(2).max(1), enc[1].div_ceil(2).max(1), enc[2].div_ceil(2).max(1), enc[3].div_ceil(2).max(1)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    UniformFan(usize),
    Zero,
    PosEmb,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    #[allow(dead_code)] // layout introspection when debugging serialization
    name: String,
    offset: usize,
    len: usize,
    init: InitKind,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlockIdx {
    w: usize,
    b: usize,
    sw: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    pos: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIdx {
    blocks: [ConvBlockIdx; 4],
    attn: Option<AttnIdx>,
    flat_w: usize,
    flat_b: usize,
    channels: [usize; 4],
    spatial: [usize; 5],
    embed: usize,
}

#[derive(Debug, Clone)]
struct DecoderIdx {
    lin_w: usize,
    lin_b: usize,
    convs: [(usize, usize); 4],
}

#[derive(Debug, Clone)]
struct HeadIdx {
    lift_w: usize,
    lift_b: usize,
    linears: Vec<(usize, usize)>,
}

/// Offsets of every named tensor inside the flat parameter vector, in the
/// declared serialization order: map encoder, footprint encoder, decoder,
/// pose lift, head.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    attention_heads: usize,
    map_enc: EncoderIdx,
    fp_enc: EncoderIdx,
    decoder: DecoderIdx,
    head: HeadIdx,
    /// Parameter offset where the pose lift + head region starts; everything
    /// from here to the end belongs to the per-sample path.
    head_region_start: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, len: usize, init: InitKind) -> usize {
        let offset = self.total;
        self.tensors.push(TensorSpec { name, offset, len, init });
        self.total += len;
        self.tensors.len() - 1
    }

    fn encoder(&mut self, prefix: &str, side: usize, channels: [usize; 4], embed: usize, attn: bool) -> EncoderIdx {
        let mut spatial = [side; 5];
        for i in 0..4 {
            spatial[i + 1] = conv_out_size(spatial[i], 3, 2, 1);
        }
        let mut blocks = Vec::with_capacity(4);
        let mut ci = 1usize;
        for (i, &co) in channels.iter().enumerate() {
            let w = self.push(format!("{prefix}.block{i}.w"), co * ci * 9, InitKind::UniformFan(ci * 9));
            let b = self.push(format!("{prefix}.block{i}.b"), co, InitKind::Zero);
            let sw = self.push(format!("{prefix}.block{i}.sw"), co * ci, InitKind::UniformFan(ci));
            blocks.push(ConvBlockIdx { w, b, sw });
            ci = co;
        }
        let d = channels[3];
        let t = spatial[4] * spatial[4];
        let attn = attn.then(|| AttnIdx {
            pos: self.push(format!("{prefix}.attn.pos"), t * d, InitKind::PosEmb),
            wq: self.push(format!("{prefix}.attn.wq"), d * d, InitKind::UniformFan(d)),
            bq: self.push(format!("{prefix}.attn.bq"), d, InitKind::Zero),
            wk: self.push(format!("{prefix}.attn.wk"), d * d, InitKind::UniformFan(d)),
            bk: self.push(format!("{prefix}.attn.bk"), d, InitKind::Zero),
            wv: self.push(format!("{prefix}.attn.wv"), d * d, InitKind::UniformFan(d)),
            bv: self.push(format!("{prefix}.attn.bv"), d, InitKind::Zero),
            wo: self.push(format!("{prefix}.attn.wo"), d * d, InitKind::UniformFan(d)),
            bo: self.push(format!("{prefix}.attn.bo"), d, InitKind::Zero),
        });
        let flat = d * t;
        let flat_w = self.push(format!("{prefix}.flat.w"), embed * flat, InitKind::UniformFan(flat));
        let flat_b = self.push(format!("{prefix}.flat.b"), embed, InitKind::Zero);
        EncoderIdx { blocks: [blocks[0], blocks[1], blocks[2], blocks[3]], attn, flat_w, flat_b, channels, spatial, embed }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut b = LayoutBuilder { tensors: Vec::new(), total: 0 };

        let map_enc = b.encoder("map_enc", config.map_side, config.enc_channels, config.embed_map, config.attention);
        let fp_enc = b.encoder(
            "fp_enc",
            config.map_side,
            fp_channels(&config.enc_channels),
            config.embed_fp,
            config.attention,
        );

        // decoder mirrors the map encoder with nearest-neighbor upsampling
        let c = config.enc_channels;
        let s4 = map_enc.spatial[4];
        let feat = c[3] * s4 * s4;
        let lin_w = b.push("dec.lin.w".into(), feat * config.embed_map, InitKind::UniformFan(config.embed_map));
        let lin_b = b.push("dec.lin.b".into(), feat, InitKind::Zero);
        let dec_ch = [(c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], 1)];
        let mut convs = [(0usize, 0usize); 4];
        for (i, &(dci, dco)) in dec_ch.iter().enumerate() {
            let w = b.push(format!("dec.conv{i}.w"), dco * dci * 9, InitKind::UniformFan(dci * 9));
            let bb = b.push(format!("dec.conv{i}.b"), dco, InitKind::Zero);
            convs[i] = (w, bb);
        }
        let decoder = DecoderIdx { lin_w, lin_b, convs };

        let head_region_start = b.total;
        let lift_w =
            b.push("pose_lift.w".into(), config.embed_pose * POSE_FEATS, InitKind::UniformFan(POSE_FEATS));
        let lift_b = b.push("pose_lift.b".into(), config.embed_pose, InitKind::Zero);
        let mut widths = vec![config.embed_map + config.embed_fp + config.embed_pose];
        widths.extend_from_slice(&config.head_widths);
        widths.push(1);
        let mut linears = Vec::new();
        for i in 0..widths.len() - 1 {
            let w = b.push(format!("head.l{i}.w"), widths[i + 1] * widths[i], InitKind::UniformFan(widths[i]));
            let bb = b.push(format!("head.l{i}.b"), widths[i + 1], InitKind::Zero);
            linears.push((w, bb));
        }
        let head = HeadIdx { lift_w, lift_b, linears };

        Ok(Self {
            tensors: b.tensors,
            total: b.total,
            attention_heads: config.attention_heads.max(1),
            map_enc,
            fp_enc,
            decoder,
            head,
            head_region_start,
        })
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn head_region_start(&self) -> usize {
        self.head_region_start
    }

    fn slice<'a>(&self, params: &'a [f64], idx: usize) -> &'a [f64] {
        let t = &self.tensors[idx];
        &params[t.offset..t.offset + t.len]
    }

    /// Two disjoint mutable tensor views would fight the borrow checker, so
    /// gradient accumulation passes the full buffer and offsets instead.
    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let t = &self.tensors[idx];
        t.offset..t.offset + t.len
    }
}

/// Source geometry a map embedding was computed from; the pose featurization
/// normalizes (x, y) by this window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapFrame {
    pub origin: (f64, f64),
    pub extent: (f64, f64),
}

impl MapFrame {
    pub fn of(map: &OccupancyGrid) -> Self {
        Self { origin: map.origin(), extent: map.extent() }
    }
}

/// Fixed-length vector summary of a map or footprint. Map embeddings carry the
/// frame used to normalize poses; footprint embeddings do not need one.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source_id: String,
    pub frame: Option<MapFrame>,
}

fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The whole trainable architecture: both encoders, the reconstruction
/// decoder, and the potential head, parameterized by one flat vector.
#[derive(Debug, Clone)]
pub struct PotentialModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PotentialModel {
    /// Freshly initialized model; weights are drawn from the config seed, so
    /// the same config yields the same model.
    pub fn new(config: ModelConfig) -> Result<Self, NetError> {
        let layout = Layout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        for spec in &layout.tensors {
            let dst = &mut params[spec.offset..spec.offset + spec.len];
            match spec.init {
                InitKind::Zero => {}
                InitKind::UniformFan(fan_in) => {
                    let a = (1.0 / fan_in as f64).sqrt();
                    for v in dst {
                        *v = rng.gen_range(-a..a);
                    }
                }
                InitKind::PosEmb => {
                    for v in dst {
                        *v = rng.gen_range(-0.02..0.02);
                    }
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self, NetError> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.total {
            return Err(NetError::BadModelFile(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Number of parameters, and how many sit in the encoders.
    pub fn param_counts(&self) -> (usize, usize) {
        let enc = self.layout.decoder.lin_w;
        let enc_params = self.layout.tensors[..enc].iter().map(|t| t.len).sum();
        (self.layout.total, enc_params)
    }

    /// Rasterize a map for the encoder: occupied = 1.0, free = 0.0.
    pub fn map_image(&self, map: &OccupancyGrid) -> Result<Vec<f64>, NetError> {
        let side = self.config.map_side;
        if map.width() != side || map.height() != side {
            return Err(NetError::WrongRasterSize { got: map.width().max(map.height()), want: side });
        }
        Ok(map.cells().iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
    }

    /// Rasterize a footprint onto the encoder canvas, anchor at the canvas
    /// center, one mask cell per pixel.
    pub fn footprint_image(&self, fp: &Footprint) -> Result<Vec<f64>, NetError> {
        let side = self.config.map_side;
        let mut image = vec![0.0; side * side];
        let (ar, ac) = fp.anchor();
        let half = side as f64 / 2.0;
        for r in 0..fp.mask_height() {
            for c in 0..fp.mask_width() {
                if !fp.is_set(r, c) {
                    continue;
                }
                let pr = (half + (r as f64 + 0.5 - ar)).floor();
                let pc = (half + (c as f64 + 0.5 - ac)).floor();
                if pr < 0.0 || pc < 0.0 || pr >= side as f64 || pc >= side as f64 {
                    return Err(NetError::FootprintTooLarge { side });
                }
                image[pr as usize * side + pc as usize] = 1.0;
            }
        }
        Ok(image)
    }

    /// Encode an obstacle map into its embedding. Deterministic: identical
    /// rasters yield identical vectors.
    pub fn encode_map(&self, map: &OccupancyGrid) -> Result<Embedding, NetError> {
        let image = self.map_image(map)?;
        let (values, _) = encoder_forward(&self.params, &self.layout, &self.layout.map_enc, &image, self.config.activation);
        let hash = fnv1a64(
            map.cells()
                .iter()
                .map(|&c| c as u8)
                .chain(map.resolution().to_le_bytes())
                .chain(map.origin().0.to_le_bytes())
                .chain(map.origin().1.to_le_bytes()),
        );
        Ok(Embedding { values, source_id: format!("map:{hash:016x}"), frame: Some(MapFrame::of(map)) })
    }

    /// Encode a robot footprint into its embedding.
    pub fn encode_footprint(&self, fp: &Footprint) -> Result<Embedding, NetError> {
        let image = self.footprint_image(fp)?;
        let (values, _) = encoder_forward(&self.params, &self.layout, &self.layout.fp_enc, &image, self.config.activation);
        Ok(Embedding { values, source_id: format!("fp:{}", fp.id()), frame: None })
    }

    fn check_embeddings(&self, e_map: &Embedding, e_fp: &Embedding) -> Result<MapFrame, NetError> {
        if e_map.values.len() != self.config.embed_map {
            return Err(NetError::DimensionMismatch(format!(
                "map embedding has {} dims, model expects {}",
                e_map.values.len(),
                self.config.embed_map
            )));
        }
        if e_fp.values.len() != self.config.embed_fp {
            return Err(NetError::DimensionMismatch(format!(
                "footprint embedding has {} dims, model expects {}",
                e_fp.values.len(),
                self.config.embed_fp
            )));
        }
        e_map.frame.ok_or(NetError::MissingFrame)
    }

    /// The neural potential: scalar repulsive potential of a pose given fixed
    /// map and footprint embeddings. Smooth in (x, y, theta) and 2pi-periodic
    /// in theta through the sin/cos featurization.
    pub fn np_function(&self, e_map: &Embedding, e_fp: &Embedding, pose: Pose) -> Result<f64, NetError> {
        let frame = self.check_embeddings(e_map, e_fp)?;
        let feats = pose_features(pose, frame);
        let (h, _) = head_forward(&self.params, &self.layout, &e_map.values, &e_fp.values, &feats, self.config.activation);
        Ok(h * self.config.potential_scale)
    }

    /// Exact reverse-mode gradient of [`Self::np_function`] with respect to the
    /// pose coordinates (d/dx, d/dy, d/dtheta); embeddings held constant.
    pub fn np_function_grad(&self, e_map: &Embedding, e_fp: &Embedding, pose: Pose) -> Result<[f64; 3], NetError> {
        let frame = self.check_embeddings(e_map, e_fp)?;
        let feats = pose_features(pose, frame);
        let (_, cache) = head_forward(&self.params, &self.layout, &e_map.values, &e_fp.values, &feats, self.config.activation);
        let mut d_feats = [0.0; POSE_FEATS];
        head_backward_input_only(&self.params, &self.layout, &cache, 1.0, self.config.activation, &mut d_feats);
        let scale = self.config.potential_scale;
        let g = pose_feature_vjp(pose, frame, &d_feats);
        Ok([scale * g[0], scale * g[1], scale * g[2]])
    }

    /// Decode a map embedding back into per-cell occupancy probabilities,
    /// strictly inside (0, 1), shape `map_side^2`.
    pub fn reconstruct_map(&self, e_map: &Embedding) -> Result<Vec<f64>, NetError> {
        if e_map.values.len() != self.config.embed_map {
            return Err(NetError::DimensionMismatch(format!(
                "map embedding has {} dims, model expects {}",
                e_map.values.len(),
                self.config.embed_map
            )));
        }
        let (logits, _) = decoder_forward(&self.params, &self.layout, &e_map.values, self.config.activation);
        Ok(logits.iter().map(|&z| layers::sigmoid(z)).collect())
    }

    /// Mean per-cell reconstruction cross-entropy (nats) against a map raster.
    pub fn reconstruction_ce(&self, e_map: &Embedding, map: &OccupancyGrid) -> Result<f64, NetError> {
        if e_map.values.len() != self.config.embed_map {
            return Err(NetError::DimensionMismatch("map embedding".into()));
        }
        let image = self.map_image(map)?;
        let (logits, _) = decoder_forward(&self.params, &self.layout, &e_map.values, self.config.activation);
        Ok(bce_with_logits(&logits, &image))
    }
}

/// Number of pose features fed to the lift layer.
pub const POSE_FEATS: usize = 32;
/// Octaves of the x/y sinusoidal encoding.
const XY_OCTAVES: usize = 6;
/// Heading harmonics sin(k theta), cos(k theta).
const THETA_HARMONICS: usize = 3;

/// Pose featurization: (x, y) normalized to [0, 1] by the map frame and
/// centered, heading harmonics, and a sinusoidal positional encoding of the
/// normalized coordinates. Everything is smooth in (x, y, theta) and exactly
/// 2pi-periodic in theta; raw normalized coordinates alone leave the head
/// unable to fit the sharp potential transitions in any reasonable number of
/// SGD steps.
pub fn pose_features(pose: Pose, frame: MapFrame) -> [f64; POSE_FEATS] {
    let xh = (pose.x - frame.origin.0) / frame.extent.0;
    let yh = (pose.y - frame.origin.1) / frame.extent.1;
    let mut f = [0.0; POSE_FEATS];
    f[0] = 2.0 * xh - 1.0;
    f[1] = 2.0 * yh - 1.0;
    let mut i = 2;
    for k in 1..=THETA_HARMONICS {
        let (s, c) = (k as f64 * pose.theta).sin_cos();
        f[i] = s;
        f[i + 1] = c;
        i += 2;
    }
    for k in 0..XY_OCTAVES {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        let (sx, cx) = (w * xh).sin_cos();
        let (sy, cy) = (w * yh).sin_cos();
        f[i] = sx;
        f[i + 1] = cx;
        f[i + 2] = sy;
        f[i + 3] = cy;
        i += 4;
    }
    debug_assert_eq!(i, POSE_FEATS);
    f
}

/// Chain the feature gradient back to (x, y, theta): returns the Jacobian
/// contraction of `d_feats` with d(features)/d(pose).
pub fn pose_feature_vjp(pose: Pose, frame: MapFrame, d_feats: &[f64; POSE_FEATS]) -> [f64; 3] {
    let xh = (pose.x - frame.origin.0) / frame.extent.0;
    let yh = (pose.y - frame.origin.1) / frame.extent.1;
    let dxh = 1.0 / frame.extent.0;
    let dyh = 1.0 / frame.extent.1;
    let mut gx = d_feats[0] * 2.0 * dxh;
    let mut gy = d_feats[1] * 2.0 * dyh;
    let mut gt = 0.0;
    let mut i = 2;
    for k in 1..=THETA_HARMONICS {
        let (s, c) = (k as f64 * pose.theta).sin_cos();
        gt += d_feats[i] * k as f64 * c - d_feats[i + 1] * k as f64 * s;
        i += 2;
    }
    for k in 0..XY_OCTAVES {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        let (sx, cx) = (w * xh).sin_cos();
        let (sy, cy) = (w * yh).sin_cos();
        gx += (d_feats[i] * cx - d_feats[i + 1] * sx) * w * dxh;
        gy += (d_feats[i + 2] * cy - d_feats[i + 3] * sy) * w * dyh;
        i += 4;
    }
    [gx, gy, gt]
}

// ---------------------------------------------------------------------------
// forward/backward plumbing shared with the training loop

pub(crate) struct BlockCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

pub(crate) struct EncoderCache {
    blocks: Vec<BlockCache>,
    attn: Option<AttentionCache>,
    flat_in: Vec<f64>,
}

pub(crate) fn encoder_forward(
    params: &[f64],
    layout: &Layout,
    enc: &EncoderIdx,
    image: &[f64],
    act: Activation,
) -> (Vec<f64>, EncoderCache) {
    let mut x = image.to_vec();
    let mut ci = 1usize;
    let mut blocks = Vec::with_capacity(4);
    for (i, blk) in enc.blocks.iter().enumerate() {
        let co = enc.channels[i];
        let (hi, ho) = (enc.spatial[i], enc.spatial[i + 1]);
        let mut pre = vec![0.0; co * ho * ho];
        conv2d_forward(&x, (ci, hi, hi), layout.slice(params, blk.w), Some(layout.slice(params, blk.b)), co, 3, 2, 1, &mut pre);
        let mut short = vec![0.0; co * ho * ho];
        conv2d_forward(&x, (ci, hi, hi), layout.slice(params, blk.sw), None, co, 1, 2, 0, &mut short);
        for (p, s) in pre.iter_mut().zip(&short) {
            *p += s;
        }
        let out: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        blocks.push(BlockCache { input: x, pre });
        x = out;
        ci = co;
    }

    let d = enc.channels[3];
    let s4 = enc.spatial[4];
    let t = s4 * s4;
    let attn_cache = if let Some(a) = &enc.attn {
        // channel-major features -> t x d tokens
        let mut tokens = vec![0.0; t * d];
        for ch in 0..d {
            for p in 0..t {
                tokens[p * d + ch] = x[ch * t + p];
            }
        }
        let ap = AttentionParams {
            pos: layout.slice(params, a.pos),
            wq: layout.slice(params, a.wq),
            bq: layout.slice(params, a.bq),
            wk: layout.slice(params, a.wk),
            bk: layout.slice(params, a.bk),
            wv: layout.slice(params, a.wv),
            bv: layout.slice(params, a.bv),
            wo: layout.slice(params, a.wo),
            bo: layout.slice(params, a.bo),
        };
        let mut tokens_out = vec![0.0; t * d];
        let cache = attention_forward(&tokens, t, d, layout.attention_heads, &ap, &mut tokens_out);
        for ch in 0..d {
            for p in 0..t {
                x[ch * t + p] = tokens_out[p * d + ch];
            }
        }
        Some(cache)
    } else {
        None
    };

    let mut emb = vec![0.0; enc.embed];
    linear_forward(&x, layout.slice(params, enc.flat_w), layout.slice(params, enc.flat_b), &mut emb);
    (emb, EncoderCache { blocks, attn: attn_cache, flat_in: x })
}

pub(crate) fn encoder_backward(
    params: &[f64],
    layout: &Layout,
    enc: &EncoderIdx,
    cache: &EncoderCache,
    d_emb: &[f64],
    act: Activation,
    grad: &mut [f64],
) {
    let d = enc.channels[3];
    let s4 = enc.spatial[4];
    let t = s4 * s4;

    let mut d_flat = vec![0.0; cache.flat_in.len()];
    {
        let wr = layout.range(enc.flat_w);
        let br = layout.range(enc.flat_b);
        let w = layout.slice(params, enc.flat_w);
        let mut dwbuf = vec![0.0; wr.len()];
        let mut dbbuf = vec![0.0; br.len()];
        linear_backward(&cache.flat_in, w, d_emb, &mut dwbuf, &mut dbbuf, Some(&mut d_flat));
        for (dst, src) in grad[wr].iter_mut().zip(&dwbuf) {
            *dst += src;
        }
        for (dst, src) in grad[br].iter_mut().zip(&dbbuf) {
            *dst += src;
        }
    }

    let mut d_x = d_flat;
    if let (Some(a), Some(attn_cache)) = (&enc.attn, &cache.attn) {
        let mut d_tokens_out = vec![0.0; t * d];
        for ch in 0..d {
            for p in 0..t {
                d_tokens_out[p * d + ch] = d_x[ch * t + p];
            }
        }
        let ap = AttentionParams {
            pos: layout.slice(params, a.pos),
            wq: layout.slice(params, a.wq),
            bq: layout.slice(params, a.bq),
            wk: layout.slice(params, a.wk),
            bk: layout.slice(params, a.bk),
            wv: layout.slice(params, a.wv),
            bv: layout.slice(params, a.bv),
            wo: layout.slice(params, a.wo),
            bo: layout.slice(params, a.bo),
        };
        let mut d_tokens_in = vec![0.0; t * d];
        // split the grad buffer into the nine attention tensors
        let ranges = [a.pos, a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo].map(|i| layout.range(i));
        let mut bufs: Vec<Vec<f64>> = ranges.iter().map(|r| vec![0.0; r.len()]).collect();
        {
            let (b0, rest) = bufs.split_at_mut(1);
            let (b1, rest) = rest.split_at_mut(1);
            let (b2, rest) = rest.split_at_mut(1);
            let (b3, rest) = rest.split_at_mut(1);
            let (b4, rest) = rest.split_at_mut(1);
            let (b5, rest) = rest.split_at_mut(1);
            let (b6, rest) = rest.split_at_mut(1);
            let (b7, b8) = rest.split_at_mut(1);
            let mut g = AttentionGrads {
                pos: &mut b0[0],
                wq: &mut b1[0],
                bq: &mut b2[0],
                wk: &mut b3[0],
                bk: &mut b4[0],
                wv: &mut b5[0],
                bv: &mut b6[0],
                wo: &mut b7[0],
                bo: &mut b8[0],
            };
            attention_backward(t, d, layout.attention_heads, &ap, attn_cache, &d_tokens_out, &mut g, &mut d_tokens_in);
        }
        for (r, buf) in ranges.iter().zip(&bufs) {
            for (dst, src) in grad[r.clone()].iter_mut().zip(buf) {
                *dst += src;
            }
        }
        for ch in 0..d {
            for p in 0..t {
                d_x[ch * t + p] = d_tokens_in[p * d + ch];
            }
        }
    }

    // residual conv blocks, in reverse
    for i in (0..4).rev() {
        let blk = &enc.blocks[i];
        let bc = &cache.blocks[i];
        let co = enc.channels[i];
        let ci = if i == 0 { 1 } else { enc.channels[i - 1] };
        let hi = enc.spatial[i];
        let d_pre: Vec<f64> = d_x.iter().zip(&bc.pre).map(|(&g, &p)| g * act.grad(p)).collect();
        let mut d_input = if i > 0 { Some(vec![0.0; ci * hi * hi]) } else { None };
        {
            // main 3x3 conv
            let w = layout.slice(params, blk.w);
            let wr = layout.range(blk.w);
            let br = layout.range(blk.b);
            let mut dwbuf = vec![0.0; wr.len()];
            let mut dbbuf = vec![0.0; br.len()];
            conv2d_backward(&bc.input, (ci, hi, hi), w, co, 3, 2, 1, &d_pre, &mut dwbuf, Some(&mut dbbuf), d_input.as_deref_mut());
            for (dst, src) in grad[wr].iter_mut().zip(&dwbuf) {
                *dst += src;
            }
            for (dst, src) in grad[br].iter_mut().zip(&dbbuf) {
                *dst += src;
            }
        }
        {
            // 1x1 shortcut
            let sw = layout.slice(params, blk.sw);
            let swr = layout.range(blk.sw);
            let mut dswbuf = vec![0.0; swr.len()];
            conv2d_backward(&bc.input, (ci, hi, hi), sw, co, 1, 2, 0, &d_pre, &mut dswbuf, None, d_input.as_deref_mut());
            for (dst, src) in grad[swr].iter_mut().zip(&dswbuf) {
                *dst += src;
            }
        }
        match d_input {
            Some(di) => d_x = di,
            None => break,
        }
    }
}

pub(crate) struct DecoderCache {
    lin_pre: Vec<f64>,
    // per block: (input before upsample, upsampled input, conv pre-activation)
    blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

pub(crate) fn decoder_forward(
    params: &[f64],
    layout: &Layout,
    e_map: &[f64],
    act: Activation,
) -> (Vec<f64>, DecoderCache) {
    let dec = &layout.decoder;
    let enc = &layout.map_enc;
    let c = enc.channels;
    let s4 = enc.spatial[4];

    let mut lin_pre = vec![0.0; c[3] * s4 * s4];
    linear_forward(e_map, layout.slice(params, dec.lin_w), layout.slice(params, dec.lin_b), &mut lin_pre);
    let mut x: Vec<f64> = lin_pre.iter().map(|&v| act.apply(v)).collect();

    let chans = [(c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], 1)];
    let mut blocks = Vec::with_capacity(4);
    let mut side = s4;
    for (i, &(dci, dco)) in chans.iter().enumerate() {
        let mut up = vec![0.0; dci * (2 * side) * (2 * side)];
        upsample2_forward(&x, (dci, side, side), &mut up);
        side *= 2;
        let mut pre = vec![0.0; dco * side * side];
        let (w, b) = dec.convs[i];
        conv2d_forward(&up, (dci, side, side), layout.slice(params, w), Some(layout.slice(params, b)), dco, 3, 1, 1, &mut pre);
        let out: Vec<f64> = if i < 3 { pre.iter().map(|&v| act.apply(v)).collect() } else { pre.clone() };
        blocks.push((x, up, pre));
        x = out;
    }
    (x, DecoderCache { lin_pre, blocks })
}

/// Backward through the decoder given the forward embedding input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_backward_with(
    params: &[f64],
    layout: &Layout,
    cache: &DecoderCache,
    e_map: &[f64],
    d_logits: &[f64],
    act: Activation,
    grad: &mut [f64],
    d_e_map: &mut [f64],
) {
    let dec = &layout.decoder;
    let enc = &layout.map_enc;
    let c = enc.channels;
    let chans = [(c[3], c[2]), (c[2], c[1]), (c[1], c[0]), (c[0], 1)];

    let mut d_out = d_logits.to_vec();
    for i in (0..4).rev() {
        let (dci, dco) = chans[i];
        let (input, up, pre) = &cache.blocks[i];
        let in_len = input.len() / dci;
        let side = (in_len as f64).sqrt().round() as usize;
        let out_side = side * 2;

        let d_pre: Vec<f64> = if i < 3 {
            d_out.iter().zip(pre).map(|(&g, &p)| g * act.grad(p)).collect()
        } else {
            d_out.clone()
        };
        let (wi, bi) = dec.convs[i];
        let w = layout.slice(params, wi);
        let wr = layout.range(wi);
        let br = layout.range(bi);
        let mut dwbuf = vec![0.0; wr.len()];
        let mut dbbuf = vec![0.0; br.len()];
        let mut d_up = vec![0.0; up.len()];
        conv2d_backward(up, (dci, out_side, out_side), w, dco, 3, 1, 1, &d_pre, &mut dwbuf, Some(&mut dbbuf), Some(&mut d_up));
        for (dst, src) in grad[wr].iter_mut().zip(&dwbuf) {
            *dst += src;
        }
        for (dst, src) in grad[br].iter_mut().zip(&dbbuf) {
            *dst += src;
        }
        let mut d_in = vec![0.0; input.len()];
        upsample2_backward(&d_up, (dci, side, side), &mut d_in);
        d_out = d_in;
    }

    let d_lin_pre: Vec<f64> = d_out.iter().zip(&cache.lin_pre).map(|(&g, &p)| g * act.grad(p)).collect();
    let w = layout.slice(params, dec.lin_w);
    let wr = layout.range(dec.lin_w);
    let br = layout.range(dec.lin_b);
    let mut dwbuf = vec![0.0; wr.len()];
    let mut dbbuf = vec![0.0; br.len()];
    linear_backward(e_map, w, &d_lin_pre, &mut dwbuf, &mut dbbuf, Some(d_e_map));
    for (dst, src) in grad[wr].iter_mut().zip(&dwbuf) {
        *dst += src;
    }
    for (dst, src) in grad[br].iter_mut().zip(&dbbuf) {
        *dst += src;
    }
}

pub(crate) struct HeadCache {
    pose_feats: [f64; POSE_FEATS],
    concat: Vec<f64>,
    pres: Vec<Vec<f64>>, // pre-activations per linear layer (last one is the output)
}

pub(crate) fn head_forward(
    params: &[f64],
    layout: &Layout,
    e_map: &[f64],
    e_fp: &[f64],
    pose_feats: &[f64; POSE_FEATS],
    act: Activation,
) -> (f64, HeadCache) {
    let head = &layout.head;
    let embed_pose = layout.tensors[head.lift_b].len;
    let mut e_pose = vec![0.0; embed_pose];
    linear_forward(pose_feats, layout.slice(params, head.lift_w), layout.slice(params, head.lift_b), &mut e_pose);

    let mut concat = Vec::with_capacity(e_map.len() + e_fp.len() + embed_pose);
    concat.extend_from_slice(e_map);
    concat.extend_from_slice(e_fp);
    concat.extend_from_slice(&e_pose);

    let mut x = concat.clone();
    let mut pres = Vec::with_capacity(head.linears.len());
    for (li, &(w, b)) in head.linears.iter().enumerate() {
        let n_out = layout.tensors[b].len;
        let mut pre = vec![0.0; n_out];
        linear_forward(&x, layout.slice(params, w), layout.slice(params, b), &mut pre);
        x = if li + 1 < head.linears.len() { pre.iter().map(|&v| act.apply(v)).collect() } else { pre.clone() };
        pres.push(pre);
    }
    let out = x[0];
    (out, HeadCache { pose_feats: *pose_feats, concat, pres })
}

/// Backward through the head and pose lift for the pose gradient only; no
/// weight gradients are accumulated.
pub(crate) fn head_backward_input_only(
    params: &[f64],
    layout: &Layout,
    cache: &HeadCache,
    d_out: f64,
    act: Activation,
    d_pose_feats: &mut [f64; POSE_FEATS],
) {
    let head = &layout.head;
    let n_layers = head.linears.len();
    let mut d_x = vec![d_out];
    for li in (0..n_layers).rev() {
        let (w, _b) = head.linears[li];
        let weight = layout.slice(params, w);
        let input_len = if li == 0 {
            cache.concat.len()
        } else {
            cache.pres[li - 1].len()
        };
        let mut d_in = vec![0.0; input_len];
        // d_in = W^T d_x
        let n_out = d_x.len();
        for o in 0..n_out {
            let g = d_x[o];
            if g == 0.0 {
                continue;
            }
            let row = &weight[o * input_len..(o + 1) * input_len];
            for i in 0..input_len {
                d_in[i] += g * row[i];
            }
        }
        if li > 0 {
            for (v, &p) in d_in.iter_mut().zip(&cache.pres[li - 1]) {
                *v *= act.grad(p);
            }
        }
        d_x = d_in;
    }
    // slice off the pose part of the concat gradient and push through the lift
    let embed_pose = layout.tensors[head.lift_b].len;
    let pose_grad = &d_x[d_x.len() - embed_pose..];
    let lift_w = layout.slice(params, head.lift_w);
    for (o, &g) in pose_grad.iter().enumerate() {
        for i in 0..POSE_FEATS {
            d_pose_feats[i] += g * lift_w[o * POSE_FEATS + i];
        }
    }
}

/// Full head backward: accumulates lift and head weight gradients into `grad`
/// (whose index 0 corresponds to parameter offset `grad_offset`) and embedding
/// gradients into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward(
    params: &[f64],
    layout: &Layout,
    cache: &HeadCache,
    d_out: f64,
    act: Activation,
    grad: &mut [f64],
    grad_offset: usize,
    d_e_map: &mut [f64],
    d_e_fp: &mut [f64],
) {
    let head = &layout.head;
    let n_layers = head.linears.len();
    let mut d_x = vec![d_out];
    for li in (0..n_layers).rev() {
        let (w, b) = head.linears[li];
        let weight = layout.slice(params, w);
        let input: Vec<f64> = if li == 0 {
            cache.concat.clone()
        } else {
            cache.pres[li - 1].iter().map(|&p| act.apply(p)).collect()
        };
        let wr = layout.range(w);
        let br = layout.range(b);
        let mut d_in = vec![0.0; input.len()];
        let mut dwbuf = vec![0.0; wr.len()];
        let mut dbbuf = vec![0.0; br.len()];
        linear_backward(&input, weight, &d_x, &mut dwbuf, &mut dbbuf, Some(&mut d_in));
        for (dst, src) in grad[wr.start - grad_offset..wr.end - grad_offset].iter_mut().zip(&dwbuf) {
            *dst += src;
        }
        for (dst, src) in grad[br.start - grad_offset..br.end - grad_offset].iter_mut().zip(&dbbuf) {
            *dst += src;
        }
        if li > 0 {
            for (v, &p) in d_in.iter_mut().zip(&cache.pres[li - 1]) {
                *v *= act.grad(p);
            }
        }
        d_x = d_in;
    }

    let embed_pose = layout.tensors[head.lift_b].len;
    let n_map = d_e_map.len();
    let n_fp = d_e_fp.len();
    for i in 0..n_map {
        d_e_map[i] += d_x[i];
    }
    for i in 0..n_fp {
        d_e_fp[i] += d_x[n_map + i];
    }
    let d_e_pose = &d_x[n_map + n_fp..n_map + n_fp + embed_pose];
    let lift_w = layout.slice(params, head.lift_w);
    let wr = layout.range(head.lift_w);
    let br = layout.range(head.lift_b);
    let mut dwbuf = vec![0.0; wr.len()];
    let mut dbbuf = vec![0.0; br.len()];
    linear_backward(&cache.pose_feats, lift_w, d_e_pose, &mut dwbuf, &mut dbbuf, None);
    for (dst, src) in grad[wr.start - grad_offset..wr.end - grad_offset].iter_mut().zip(&dwbuf) {
        *dst += src;
    }
    for (dst, src) in grad[br.start - grad_offset..br.end - grad_offset].iter_mut().zip(&dbbuf) {
        *dst += src;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{PotentialParams, Sample};
    use std::f64::consts::PI;

    fn mini_config(seed: u64) -> ModelConfig {
        ModelConfig {
            map_side: 16,
            embed_map: 8,
            embed_fp: 4,
            embed_pose: 4,
            attention: true,
            attention_heads: 2,
            enc_channels: [2, 2, 4, 4],
            head_widths: vec![8, 8],
            activation: Activation::Softplus,
            seed,
            potential_scale: 15.0 * PI,
            epochs_trained: 0,
        }
    }

    fn mini_map(seed: u64) -> OccupancyGrid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<bool> = (0..16 * 16).map(|_| rng.gen_bool(0.15)).collect();
        OccupancyGrid::new(16, 16, 0.1, (0.0, 0.0), cells).unwrap()
    }

    fn mini_fp(id: &str, w: usize, h: usize) -> Footprint {
        Footprint::new(w, h, vec![true; w * h], 0.1, (h as f64 / 2.0, w as f64 / 2.0), id).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn embedding_shapes_and_determinism() {
        let model = PotentialModel::new(mini_config(3)).unwrap();
        let map = mini_map(1);
        let e1 = model.encode_map(&map).unwrap();
        let e2 = model.encode_map(&map).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.values.len(), 8);
        assert!(e1.frame.is_some());

        let fp = mini_fp("a", 3, 2);
        let f1 = model.encode_footprint(&fp).unwrap();
        let f2 = model.encode_footprint(&fp).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.values.len(), 4);
        assert!(f1.frame.is_none());
    }

    #[test]
    fn encode_map_wrong_size_is_error() {
        let model = PotentialModel::new(mini_config(3)).unwrap();
        let wrong = OccupancyGrid::new(8, 8, 0.1, (0.0, 0.0), vec![false; 64]).unwrap();
        assert!(matches!(model.encode_map(&wrong), Err(NetError::WrongRasterSize { .. })));
    }

    #[test]
    fn reconstruct_map_shape_and_range() {
        let model = PotentialModel::new(mini_config(4)).unwrap();
        let e = model.encode_map(&mini_map(2)).unwrap();
        let probs = model.reconstruct_map(&e).unwrap();
        assert_eq!(probs.len(), 16 * 16);
        for &p in &probs {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn np_function_finite_and_dimension_checked() {
        let model = PotentialModel::new(mini_config(5)).unwrap();
        let map = mini_map(3);
        let e_map = model.encode_map(&map).unwrap();
        let e_fp = model.encode_footprint(&mini_fp("a", 2, 2)).unwrap();
        let v = model.np_function(&e_map, &e_fp, Pose::new(0.8, 0.8, 0.3)).unwrap();
        assert!(v.is_finite());
        // far outside the frame must still be finite
        let v2 = model.np_function(&e_map, &e_fp, Pose::new(100.0, -50.0, 2.0)).unwrap();
        assert!(v2.is_finite());

        let mut bad = e_fp.clone();
        bad.values.push(0.0);
        assert!(matches!(model.np_function(&e_map, &bad, Pose::new(0.0, 0.0, 0.0)), Err(NetError::DimensionMismatch(_))));
        let frameless = Embedding { frame: None, ..e_map.clone() };
        assert!(matches!(
            model.np_function(&frameless, &e_fp, Pose::new(0.0, 0.0, 0.0)),
            Err(NetError::MissingFrame)
        ));
    }

    #[test]
    fn np_function_periodic_in_theta_bit_exact() {
        let model = PotentialModel::new(mini_config(6)).unwrap();
        let e_map = model.encode_map(&mini_map(4)).unwrap();
        let e_fp = model.encode_footprint(&mini_fp("a", 2, 3)).unwrap();
        // angles on the 2^-50 grid wrap bit-exactly through normalization
        for k in (-3000i64..3000).step_by(373) {
            let theta = k as f64 / 1024.0;
            let a = model.np_function(&e_map, &e_fp, Pose::new(0.7, 0.9, theta)).unwrap();
            let b = model.np_function(&e_map, &e_fp, Pose::new(0.7, 0.9, theta + 2.0 * PI)).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "theta = {theta}");
        }
    }

    #[test]
    fn np_grad_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let model = PotentialModel::new(mini_config(100 + seed)).unwrap();
            let map = mini_map(seed);
            let e_map = model.encode_map(&map).unwrap();
            let e_fp = model.encode_footprint(&mini_fp("a", 3, 2)).unwrap();
            for _ in 0..10 {
                let pose = Pose::new(rng.gen_range(0.1..1.5), rng.gen_range(0.1..1.5), rng.gen_range(-3.0..3.0));
                let grad = model.np_function_grad(&e_map, &e_fp, pose).unwrap();
                let h = 1e-5;
                let eval = |p: Pose| model.np_function(&e_map, &e_fp, p).unwrap();
                let fd = [
                    (eval(Pose::new(pose.x + h, pose.y, pose.theta)) - eval(Pose::new(pose.x - h, pose.y, pose.theta))) / (2.0 * h),
                    (eval(Pose::new(pose.x, pose.y + h, pose.theta)) - eval(Pose::new(pose.x, pose.y - h, pose.theta))) / (2.0 * h),
                    (eval(Pose::new(pose.x, pose.y, pose.theta + h)) - eval(Pose::new(pose.x, pose.y, pose.theta - h))) / (2.0 * h),
                ];
                for i in 0..3 {
                    assert!(
                        rel_err(grad[i], fd[i]) < 1e-4,
                        "seed {seed} coord {i}: analytic {} vs fd {}",
                        grad[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_head_weights_zero_gradient() {
        let mut model = PotentialModel::new(mini_config(7)).unwrap();
        // zero every head linear (the lift may stay nonzero)
        let head_tensors: Vec<_> = model.layout().head.linears.clone();
        for (w, b) in head_tensors {
            let wr = model.layout().range(w);
            let br = model.layout().range(b);
            model.params_mut()[wr].fill(0.0);
            model.params_mut()[br].fill(0.0);
        }
        let e_map = model.encode_map(&mini_map(9)).unwrap();
        let e_fp = model.encode_footprint(&mini_fp("a", 2, 2)).unwrap();
        let pose = Pose::new(0.5, 0.4, 1.1);
        assert_eq!(model.np_function(&e_map, &e_fp, pose).unwrap(), 0.0);
        assert_eq!(model.np_function_grad(&e_map, &e_fp, pose).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_weight_gradient_check_on_miniature_config() {
        let model = PotentialModel::new(mini_config(8)).unwrap();
        let map = mini_map(5);
        let fp_a = mini_fp("a", 3, 2);
        let fp_b = mini_fp("b", 2, 4);
        let ctx = TrainContext::new(&model, &[(0, map.clone())], &[(0, fp_a), (1, fp_b)]).unwrap();
        let batch = vec![
            Sample { map_id: 0, footprint_id: 0, pose: Pose::new(0.35, 0.42, 0.3), target: 12.0 },
            Sample { map_id: 0, footprint_id: 1, pose: Pose::new(1.1, 0.7, -1.2), target: 40.0 },
            Sample { map_id: 0, footprint_id: 0, pose: Pose::new(0.9, 1.3, 2.8), target: 3.0 },
        ];
        let lambda = 0.1;
        let (_, _, grad) = batch_loss_and_grad(&model, &ctx, &batch, lambda).unwrap();

        let loss_at = |params: &[f64]| -> f64 {
            let mut m = model.clone();
            m.params_mut().copy_from_slice(params);
            let (mse, recon, _) = batch_loss_and_grad(&m, &ctx, &batch, lambda).unwrap();
            mse + lambda * recon
        };

        let base = model.params().to_vec();
        let h = 1e-5;
        let mut checked = 0usize;
        let mut max_rel: f64 = 0.0;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            if fd.abs() < 1e-10 && grad[i].abs() < 1e-10 {
                continue;
            }
            let rel = rel_err(grad[i], fd);
            max_rel = max_rel.max(rel);
            assert!(rel < 1e-3, "weight {i} ({}): analytic {} vs fd {}", model.layout().tensors[i_to_tensor(model.layout(), i)].name, grad[i], fd);
            checked += 1;
        }
        assert!(checked > 500, "only {checked} weights had nonzero gradient");
        assert!(max_rel < 1e-3);
    }

    fn i_to_tensor(layout: &Layout, i: usize) -> usize {
        layout
            .tensors
            .iter()
            .position(|t| i >= t.offset && i < t.offset + t.len)
            .unwrap()
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        let model = PotentialModel::new(mini_config(9)).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let back = read_model(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());

        let e_map = model.encode_map(&mini_map(6)).unwrap();
        let e_fp = model.encode_footprint(&mini_fp("a", 2, 2)).unwrap();
        let pose = Pose::new(0.31, 0.77, -0.4);
        let a = model.np_function(&e_map, &e_fp, pose).unwrap();
        let e_map2 = back.encode_map(&mini_map(6)).unwrap();
        let e_fp2 = back.encode_footprint(&mini_fp("a", 2, 2)).unwrap();
        let b = back.np_function(&e_map2, &e_fp2, pose).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        let mut buf2 = Vec::new();
        write_model(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    /// Unstratified samples with ground-truth targets; the tiny test maps are
    /// too small for the banded sampler.
    fn tiny_dataset(map: &OccupancyGrid, n: usize, seed: u64) -> Vec<Sample> {
        use rand::{Rng, SeedableRng};
        let pg = crate::field::PotentialGrid::from_map(map, PotentialParams::default()).unwrap();
        let fp = mini_fp("a", 2, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (ex, ey) = map.extent();
        (0..n)
            .map(|_| {
                let pose = Pose::new(rng.gen_range(0.0..ex), rng.gen_range(0.0..ey), rng.gen_range(-3.0..3.0));
                let target = crate::field::collision_potential(map, &fp, pose, &pg).unwrap();
                Sample { map_id: 0, footprint_id: 0, pose, target }
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let map = mini_map(7);
        let dataset = tiny_dataset(&map, 80, 21);
        let fps = vec![(0u32, mini_fp("a", 2, 2))];
        let maps = vec![(0u32, map)];
        let hyper = HyperParams { epochs: 3, batch: 16, ..Default::default() };

        let mut m1 = PotentialModel::new(mini_config(10)).unwrap();
        let h1 = train(&mut m1, &dataset, &maps, &fps, &hyper).unwrap();
        let mut m2 = PotentialModel::new(mini_config(10)).unwrap();
        let h2 = train(&mut m2, &dataset, &maps, &fps, &hyper).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn lambda_zero_disables_reconstruction_path() {
        let map = mini_map(8);
        let dataset = tiny_dataset(&map, 60, 5);
        let fps = vec![(0u32, mini_fp("a", 2, 2))];
        let maps = vec![(0u32, map)];
        let hyper = HyperParams { epochs: 2, batch: 16, lambda_recon: 0.0, ..Default::default() };

        let mut model = PotentialModel::new(mini_config(11)).unwrap();
        let init = model.params().to_vec();
        let history = train(&mut model, &dataset, &maps, &fps, &hyper).unwrap();
        for e in &history {
            assert_eq!(e.train_recon, 0.0);
        }
        // decoder weights receive no gradient when the reconstruction term is off
        let dec_start = model.layout().range(model.layout().decoder.lin_w).start;
        let dec_end = model.layout().head_region_start();
        assert_eq!(&model.params()[dec_start..dec_end], &init[dec_start..dec_end]);
        // but the head did move
        assert_ne!(&model.params()[dec_end..], &init[dec_end..]);
    }

    #[test]
    fn training_converges_on_constant_targets() {
        let map = mini_map(12);
        let fp = mini_fp("a", 2, 2);
        let mut dataset = tiny_dataset(&map, 64, 9);
        for s in &mut dataset {
            s.target = 20.0;
        }
        let mut model = PotentialModel::new(mini_config(13)).unwrap();
        let hyper = HyperParams {
            epochs: 200,
            batch: 16,
            lr: 0.05,
            lambda_recon: 0.0,
            val_every: 0,
            ..Default::default()
        };
        let history = train(&mut model, &dataset, &[(0, map)], &[(0, fp)], &hyper).unwrap();
        let final_norm_mse = history.last().unwrap().train_mse / model.config().potential_scale.powi(2);
        assert!(final_norm_mse < 1e-4, "constant-target MSE {final_norm_mse}");
    }

    #[test]
    fn resumed_training_has_monotone_epoch_indices() {
        let map = mini_map(14);
        let dataset = tiny_dataset(&map, 40, 2);
        let fps = vec![(0u32, mini_fp("a", 2, 2))];
        let maps = vec![(0u32, map)];
        let hyper = HyperParams { epochs: 2, batch: 16, ..Default::default() };
        let mut model = PotentialModel::new(mini_config(15)).unwrap();
        let h1 = train(&mut model, &dataset, &maps, &fps, &hyper).unwrap();
        let h2 = train(&mut model, &dataset, &maps, &fps, &hyper).unwrap();
        let all: Vec<u64> = h1.iter().chain(&h2).map(|e| e.epoch).collect();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(model.config().epochs_trained, 4);
    }

    #[test]
    fn unresolved_ids_error() {
        let map = mini_map(15);
        let dataset = vec![Sample { map_id: 7, footprint_id: 0, pose: Pose::new(0.1, 0.1, 0.0), target: 1.0 }];
        let mut model = PotentialModel::new(mini_config(16)).unwrap();
        let err = train(&mut model, &dataset, &[(0, map)], &[(0, mini_fp("a", 2, 2))], &HyperParams::default());
        assert!(matches!(err, Err(NetError::UnresolvedId { kind: "map", id: 7 })));
    }
}
