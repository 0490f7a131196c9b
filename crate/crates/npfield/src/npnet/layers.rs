//! Dense-loop layer primitives with hand-written backward passes.
//!
//! All tensors are flat `f64` slices. Convolution weights are laid out
//! `[out_c, in_c, k, k]`, linear weights `[out, in]`, feature maps `[c, h, w]`,
//! token matrices `[t, d]`. Backward functions accumulate (`+=`) into the
//! gradient buffers so call sites can fan in several paths.

/// Smooth activation selector. Everything downstream differentiates through
/// the activation, so only C1 functions belong here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "softplus" => Some(Activation::Softplus),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation input.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^-|x|) avoids overflow on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output spatial size of a k x k convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    (ci, hi, wi): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = conv_out_size(hi, k, stride, pad);
    let wo = conv_out_size(wi, k, stride, pad);
    debug_assert_eq!(input.len(), ci * hi * wi);
    debug_assert_eq!(weight.len(), co * ci * k * k);
    debug_assert_eq!(out.len(), co * ho * wo);
    for oc in 0..co {
        let b = bias.map_or(0.0, |b| b[oc]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= hi as i64 {
                            continue;
                        }
                        let in_row = (ic * hi + iy as usize) * wi;
                        let w_row = ((oc * ci + ic) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= wi as i64 {
                                continue;
                            }
                            acc += weight[w_row + kx] * input[in_row + ix as usize];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
}

/// Accumulates gradients for the weights, bias, and (when `d_input` is given)
/// the layer input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    (ci, hi, wi): (usize, usize, usize),
    weight: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: Option<&mut [f64]>,
    mut d_input: Option<&mut [f64]>,
) {
    let ho = conv_out_size(hi, k, stride, pad);
    let wo = conv_out_size(wi, k, stride, pad);
    let mut d_bias = d_bias;
    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = d_out[(oc * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                if let Some(db) = d_bias.as_deref_mut() {
                    db[oc] += g;
                }
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= hi as i64 {
                            continue;
                        }
                        let in_row = (ic * hi + iy as usize) * wi;
                        let w_row = ((oc * ci + ic) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= wi as i64 {
                                continue;
                            }
                            d_weight[w_row + kx] += g * input[in_row + ix as usize];
                            if let Some(di) = d_input.as_deref_mut() {
                                di[in_row + ix as usize] += g * weight[w_row + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    let n_out = out.len();
    debug_assert_eq!(weight.len(), n_out * n_in);
    debug_assert_eq!(bias.len(), n_out);
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        *out_v = acc;
    }
}

pub fn linear_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        d_bias[o] += g;
        let w_row = &weight[o * n_in..(o + 1) * n_in];
        let dw_row = &mut d_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dw_row[i] += g * input[i];
        }
        if let Some(di) = d_input.as_deref_mut() {
            for i in 0..n_in {
                di[i] += g * w_row[i];
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling of a `[c, h, w]` feature map.
pub fn upsample2_forward(input: &[f64], (c, h, w): (usize, usize, usize), out: &mut [f64]) {
    let (ho, wo) = (2 * h, 2 * w);
    for ic in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[(ic * ho + y) * wo + x] = input[(ic * h + y / 2) * w + x / 2];
            }
        }
    }
}

pub fn upsample2_backward(d_out: &[f64], (c, h, w): (usize, usize, usize), d_input: &mut [f64]) {
    let (ho, wo) = (2 * h, 2 * w);
    for ic in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                d_input[(ic * h + y / 2) * w + x / 2] += d_out[(ic * ho + y) * wo + x];
            }
        }
    }
}

/// Single-layer multi-head self-attention with learned positional embeddings
/// and a residual connection: `y = x + Wo * attn(x + pos) + bo`.
pub struct AttentionParams<'a> {
    pub pos: &'a [f64],
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

pub struct AttentionCache {
    pub xp: Vec<f64>,     // t x d, tokens plus positions
    pub q: Vec<f64>,      // t x d
    pub k: Vec<f64>,      // t x d
    pub v: Vec<f64>,      // t x d
    pub attn: Vec<f64>,   // heads x t x t softmax rows
    pub heads_out: Vec<f64>, // t x d concatenated head outputs
}

pub fn attention_forward(
    x: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    p: &AttentionParams,
    out: &mut [f64],
) -> AttentionCache {
    debug_assert_eq!(x.len(), t * d);
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut xp = vec![0.0; t * d];
    for i in 0..t * d {
        xp[i] = x[i] + p.pos[i];
    }
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    for i in 0..t {
        linear_forward(&xp[i * d..(i + 1) * d], p.wq, p.bq, &mut q[i * d..(i + 1) * d]);
        linear_forward(&xp[i * d..(i + 1) * d], p.wk, p.bk, &mut k[i * d..(i + 1) * d]);
        linear_forward(&xp[i * d..(i + 1) * d], p.wv, p.bv, &mut v[i * d..(i + 1) * d]);
    }

    let mut attn = vec![0.0; heads * t * t];
    let mut heads_out = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let row = &mut attn[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + dh];
            let mut maxv = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for a in 0..dh {
                    s += qi[a] * kj[a];
                }
                *r = s * scale;
                maxv = maxv.max(*r);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - maxv).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            for j in 0..t {
                let a = attn[(h * t + i) * t + j];
                for b in 0..dh {
                    heads_out[i * d + off + b] += a * v[j * d + off + b];
                }
            }
        }
    }

    for i in 0..t {
        let dst = &mut out[i * d..(i + 1) * d];
        linear_forward(&heads_out[i * d..(i + 1) * d], p.wo, p.bo, dst);
        for (o, xv) in dst.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *o += xv;
        }
    }

    AttentionCache { xp, q, k, v, attn, heads_out }
}

pub struct AttentionGrads<'a> {
    pub pos: &'a mut [f64],
    pub wq: &'a mut [f64],
    pub bq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub bk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub bv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bo: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    t: usize,
    d: usize,
    heads: usize,
    p: &AttentionParams,
    cache: &AttentionCache,
    d_out: &[f64],
    g: &mut AttentionGrads,
    d_x: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // residual path
    for i in 0..t * d {
        d_x[i] += d_out[i];
    }

    // output projection
    let mut d_heads_out = vec![0.0; t * d];
    for i in 0..t {
        linear_backward(
            &cache.heads_out[i * d..(i + 1) * d],
            p.wo,
            &d_out[i * d..(i + 1) * d],
            g.wo,
            g.bo,
            Some(&mut d_heads_out[i * d..(i + 1) * d]),
        );
    }

    let mut d_q = vec![0.0; t * d];
    let mut d_k = vec![0.0; t * d];
    let mut d_v = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let a_row = &cache.attn[(h * t + i) * t..(h * t + i + 1) * t];
            let d_o = &d_heads_out[i * d + off..i * d + off + dh];
            // d attn and d v from o_i = sum_j a_ij v_j
            let mut d_a = vec![0.0; t];
            for j in 0..t {
                let vj = &cache.v[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for b in 0..dh {
                    s += d_o[b] * vj[b];
                    d_v[j * d + off + b] += a_row[j] * d_o[b];
                }
                d_a[j] = s;
            }
            // softmax backward
            let dot: f64 = d_a.iter().zip(a_row).map(|(da, a)| da * a).sum();
            for j in 0..t {
                let d_s = a_row[j] * (d_a[j] - dot) * scale;
                if d_s == 0.0 {
                    continue;
                }
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let qi = &cache.q[i * d + off..i * d + off + dh];
                for b in 0..dh {
                    d_q[i * d + off + b] += d_s * kj[b];
                    d_k[j * d + off + b] += d_s * qi[b];
                }
            }
        }
    }

    // projections back to xp, then pos and x
    let mut d_xp = vec![0.0; t * d];
    for i in 0..t {
        let xp_i = &cache.xp[i * d..(i + 1) * d];
        linear_backward(xp_i, p.wq, &d_q[i * d..(i + 1) * d], g.wq, g.bq, Some(&mut d_xp[i * d..(i + 1) * d]));
        linear_backward(xp_i, p.wk, &d_k[i * d..(i + 1) * d], g.wk, g.bk, Some(&mut d_xp[i * d..(i + 1) * d]));
        linear_backward(xp_i, p.wv, &d_v[i * d..(i + 1) * d], g.wv, g.bv, Some(&mut d_xp[i * d..(i + 1) * d]));
    }
    for i in 0..t * d {
        g.pos[i] += d_xp[i];
        d_x[i] += d_xp[i];
    }
}

/// Numerically stable binary cross-entropy of logits against 0/1 targets,
/// mean over cells, in nats.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum::<f64>()
        / n
}

/// d(bce)/d(logit) = (sigmoid(z) - y) / n, scaled by `coeff`.
pub fn bce_with_logits_backward(logits: &[f64], targets: &[f64], coeff: f64, d_logits: &mut [f64]) {
    let n = logits.len() as f64;
    for ((dz, &z), &y) in d_logits.iter_mut().zip(logits).zip(targets) {
        *dz += coeff * (sigmoid(z) - y) / n;
    }
}
