//! Lightweight two-way transformer mask decoder with a transposed-convolution
//! upsampling head. Every parameter here is trainable.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{
    attention_backward, attention_forward, normal_vec, Activation, LayerNorm, LayerNormCache,
    Linear, Mlp, MlpCache,
};
use super::params::{join, push, push_mut, ParamMut, ParamRef, ParamSet};
use crate::ops;
use crate::scalar::Scalar;

/// Attention with separate query/key/value projections into an internal
/// width, then projected back.
#[derive(Clone, Debug)]
pub struct DecoderAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

pub(crate) struct AttnCache<T> {
    qi: Vec<T>,
    ki: Vec<T>,
    vi: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    nq: usize,
    nk: usize,
}

impl<T: Scalar> DecoderAttention<T> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, internal: usize, heads: usize) -> Self {
        Self {
            q: Linear::trainable(rng, dim, internal),
            k: Linear::trainable(rng, dim, internal),
            v: Linear::trainable(rng, dim, internal),
            out: Linear::trainable(rng, internal, dim),
            heads,
        }
    }

    pub(crate) fn forward(
        &self,
        qi: &[T],
        ki: &[T],
        vi: &[T],
        nq: usize,
        nk: usize,
    ) -> (Vec<T>, AttnCache<T>) {
        let q = self.q.forward(qi, nq);
        let k = self.k.forward(ki, nk);
        let v = self.v.forward(vi, nk);
        let (attn, probs) = attention_forward(&q, &k, &v, nq, nk, self.q.out, self.heads);
        let y = self.out.forward(&attn, nq);
        (
            y,
            AttnCache {
                qi: qi.to_vec(),
                ki: ki.to_vec(),
                vi: vi.to_vec(),
                q,
                k,
                v,
                probs,
                attn,
                nq,
                nk,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        c: &AttnCache<T>,
        dy: &[T],
        grad: &mut DecoderAttention<T>,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let dattn = self
            .out
            .backward(&c.attn, dy, c.nq, &mut grad.out, true)
            .expect("dx requested");
        let (dq, dk, dv) = attention_backward(
            &dattn, &c.q, &c.k, &c.v, &c.probs, c.nq, c.nk, self.q.out, self.heads,
        );
        let dqi = self
            .q
            .backward(&c.qi, &dq, c.nq, &mut grad.q, true)
            .expect("dx");
        let dki = self
            .k
            .backward(&c.ki, &dk, c.nk, &mut grad.k, true)
            .expect("dx");
        let dvi = self
            .v
            .backward(&c.vi, &dv, c.nk, &mut grad.v, true)
            .expect("dx");
        (dqi, dki, dvi)
    }
}

impl<T: Scalar> ParamSet<T> for DecoderAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.q.collect(&join(prefix, "q_proj"), out);
        self.k.collect(&join(prefix, "k_proj"), out);
        self.v.collect(&join(prefix, "v_proj"), out);
        self.out.collect(&join(prefix, "out_proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.q.collect_mut(&join(prefix, "q_proj"), out);
        self.k.collect_mut(&join(prefix, "k_proj"), out);
        self.v.collect_mut(&join(prefix, "v_proj"), out);
        self.out.collect_mut(&join(prefix, "out_proj"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            q: self.q.zero_grad(),
            k: self.k.zero_grad(),
            v: self.v.zero_grad(),
            out: self.out.zero_grad(),
            heads: self.heads,
        }
    }
}

/// Token self-attention, token→image cross-attention, token MLP and
/// image→token cross-attention, each followed by a layer norm.
#[derive(Clone, Debug)]
pub struct TwoWayBlock<T> {
    pub self_attn: DecoderAttention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_token_to_image: DecoderAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub norm3: LayerNorm<T>,
    pub cross_image_to_token: DecoderAttention<T>,
    pub norm4: LayerNorm<T>,
    /// The first block attends over the raw tokens without a residual.
    pub skip_first_pe: bool,
}

pub(crate) struct TwoWayCache<T> {
    self_attn: AttnCache<T>,
    norm1: LayerNormCache<T>,
    t2i: AttnCache<T>,
    norm2: LayerNormCache<T>,
    mlp: MlpCache<T>,
    norm3: LayerNormCache<T>,
    i2t: AttnCache<T>,
    norm4: LayerNormCache<T>,
}

struct Streams<'a, T> {
    queries: &'a [T],
    keys: &'a [T],
    query_pe: &'a [T],
    key_pe: &'a [T],
    nq: usize,
    nk: usize,
}

impl<T: Scalar> TwoWayBlock<T> {
    fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig, skip_first_pe: bool) -> Self {
        let c = cfg.prompt_dim;
        let h = cfg.decoder_heads;
        Self {
            self_attn: DecoderAttention::new(rng, c, c, h),
            norm1: LayerNorm::new(c),
            cross_token_to_image: DecoderAttention::new(rng, c, cfg.cross_attention_dim(), h),
            norm2: LayerNorm::new(c),
            mlp: Mlp {
                fc1: Linear::trainable(rng, c, cfg.decoder_mlp_dim),
                fc2: Linear::trainable(rng, cfg.decoder_mlp_dim, c),
                act: Activation::Relu,
            },
            norm3: LayerNorm::new(c),
            cross_image_to_token: DecoderAttention::new(rng, c, cfg.cross_attention_dim(), h),
            norm4: LayerNorm::new(c),
            skip_first_pe,
        }
    }

    fn forward(&self, s: Streams<'_, T>) -> (Vec<T>, Vec<T>, TwoWayCache<T>) {
        let (nq, nk) = (s.nq, s.nk);
        let (q1, self_attn) = if self.skip_first_pe {
            self.self_attn
                .forward(s.queries, s.queries, s.queries, nq, nq)
        } else {
            let q = ops::added(s.queries, s.query_pe);
            let (a, c) = self.self_attn.forward(&q, &q, s.queries, nq, nq);
            (ops::added(s.queries, &a), c)
        };
        let (q1n, norm1) = self.norm1.forward(&q1);

        let qp = ops::added(&q1n, s.query_pe);
        let kp = ops::added(s.keys, s.key_pe);
        let (a, t2i) = self.cross_token_to_image.forward(&qp, &kp, s.keys, nq, nk);
        let (q2n, norm2) = self.norm2.forward(&ops::added(&q1n, &a));

        let (m, mlp) = self.mlp.forward(&q2n, nq, true);
        let (q3n, norm3) = self.norm3.forward(&ops::added(&q2n, &m));

        let qp = ops::added(&q3n, s.query_pe);
        let (a, i2t) = self.cross_image_to_token.forward(&kp, &qp, &q3n, nk, nq);
        let (k1n, norm4) = self.norm4.forward(&ops::added(s.keys, &a));

        (
            q3n,
            k1n,
            TwoWayCache {
                self_attn,
                norm1,
                t2i,
                norm2,
                mlp,
                norm3,
                i2t,
                norm4,
            },
        )
    }

    /// Returns `(d_queries, d_keys)` and accumulates into `d_query_pe`.
    fn backward(
        &self,
        c: &TwoWayCache<T>,
        dq_out: &[T],
        dk_out: &[T],
        d_query_pe: &mut [T],
        grad: &mut TwoWayBlock<T>,
    ) -> (Vec<T>, Vec<T>) {
        let dk1 = self.norm4.backward(&c.norm4, dk_out, &mut grad.norm4);
        let mut dkeys = dk1.clone();
        let (dkp, dqp, dv) =
            self.cross_image_to_token
                .backward(&c.i2t, &dk1, &mut grad.cross_image_to_token);
        ops::add_assign(&mut dkeys, &dkp);
        let mut dq3n = dq_out.to_vec();
        ops::add_assign(&mut dq3n, &dqp);
        ops::add_assign(&mut dq3n, &dv);
        ops::add_assign(d_query_pe, &dqp);

        let dq3 = self.norm3.backward(&c.norm3, &dq3n, &mut grad.norm3);
        let mut dq2n = self.mlp.backward(&c.mlp, &dq3, &mut grad.mlp);
        ops::add_assign(&mut dq2n, &dq3);

        let dq2 = self.norm2.backward(&c.norm2, &dq2n, &mut grad.norm2);
        let (dqp, dkp, dv) =
            self.cross_token_to_image
                .backward(&c.t2i, &dq2, &mut grad.cross_token_to_image);
        let mut dq1n = dq2;
        ops::add_assign(&mut dq1n, &dqp);
        ops::add_assign(d_query_pe, &dqp);
        ops::add_assign(&mut dkeys, &dkp);
        ops::add_assign(&mut dkeys, &dv);

        let dq1 = self.norm1.backward(&c.norm1, &dq1n, &mut grad.norm1);
        let (dq, dk, dv) = self
            .self_attn
            .backward(&c.self_attn, &dq1, &mut grad.self_attn);
        let mut dqueries = if self.skip_first_pe {
            vec![T::zero(); dq1.len()]
        } else {
            ops::add_assign(d_query_pe, &dq);
            ops::add_assign(d_query_pe, &dk);
            dq1
        };
        ops::add_assign(&mut dqueries, &dq);
        ops::add_assign(&mut dqueries, &dk);
        ops::add_assign(&mut dqueries, &dv);
        (dqueries, dkeys)
    }
}

impl<T: Scalar> ParamSet<T> for TwoWayBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.self_attn.collect(&join(prefix, "self_attn"), out);
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.cross_token_to_image
            .collect(&join(prefix, "cross_token_to_image"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
        self.norm3.collect(&join(prefix, "norm3"), out);
        self.cross_image_to_token
            .collect(&join(prefix, "cross_image_to_token"), out);
        self.norm4.collect(&join(prefix, "norm4"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.self_attn.collect_mut(&join(prefix, "self_attn"), out);
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.cross_token_to_image
            .collect_mut(&join(prefix, "cross_token_to_image"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
        self.norm3.collect_mut(&join(prefix, "norm3"), out);
        self.cross_image_to_token
            .collect_mut(&join(prefix, "cross_image_to_token"), out);
        self.norm4.collect_mut(&join(prefix, "norm4"), out);
    }

    fn zero_grad(&self) -> Self {
        Self {
            self_attn: self.self_attn.zero_grad(),
            norm1: self.norm1.zero_grad(),
            cross_token_to_image: self.cross_token_to_image.zero_grad(),
            norm2: self.norm2.zero_grad(),
            mlp: self.mlp.zero_grad(),
            norm3: self.norm3.zero_grad(),
            cross_image_to_token: self.cross_image_to_token.zero_grad(),
            norm4: self.norm4.zero_grad(),
            skip_first_pe: self.skip_first_pe,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder<T> {
    pub dim: usize,
    pub mask_token: Vec<T>,
    pub blocks: Vec<TwoWayBlock<T>>,
    pub final_attn: DecoderAttention<T>,
    pub final_norm: LayerNorm<T>,
    /// One `c_in → 4·c_out` map per 2× upsampling stage (kernel 2, stride 2).
    pub upscale: Vec<Linear<T>>,
    /// Per-pixel RGB projection added before the last stage's activation.
    pub pixel_proj: Linear<T>,
    /// Hypernetwork turning the mask token into per-pixel feature weights.
    pub hyper: Vec<Linear<T>>,
}

pub(crate) struct DecoderCache<T> {
    grid: usize,
    blocks: Vec<TwoWayCache<T>>,
    final_attn: AttnCache<T>,
    final_norm: LayerNormCache<T>,
    stage_inputs: Vec<Vec<T>>,
    stage_pre: Vec<Vec<T>>,
    features: Vec<T>,
    hyper_inputs: Vec<Vec<T>>,
    hyper_pre: Vec<Vec<T>>,
    weights: Vec<T>,
}

fn pixel_shuffle<T: Scalar>(y: &[T], side: usize, ch: usize) -> Vec<T> {
    let out_side = 2 * side;
    let mut out = vec![T::zero(); out_side * out_side * ch];
    for r in 0..side {
        for c in 0..side {
            let src = &y[(r * side + c) * 4 * ch..(r * side + c + 1) * 4 * ch];
            for dy in 0..2 {
                for dx in 0..2 {
                    let o = ((2 * r + dy) * out_side + 2 * c + dx) * ch;
                    let s = (dy * 2 + dx) * ch;
                    out[o..o + ch].copy_from_slice(&src[s..s + ch]);
                }
            }
        }
    }
    out
}

fn pixel_unshuffle<T: Scalar>(x: &[T], side: usize, ch: usize) -> Vec<T> {
    let out_side = 2 * side;
    let mut y = vec![T::zero(); side * side * 4 * ch];
    for r in 0..side {
        for c in 0..side {
            let dst = (r * side + c) * 4 * ch;
            for dy in 0..2 {
                for dx in 0..2 {
                    let o = ((2 * r + dy) * out_side + 2 * c + dx) * ch;
                    let s = dst + (dy * 2 + dx) * ch;
                    y[s..s + ch].copy_from_slice(&x[o..o + ch]);
                }
            }
        }
    }
    y
}

impl<T: Scalar> MaskDecoder<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.prompt_dim;
        let blocks = (0..cfg.decoder_depth)
            .map(|i| TwoWayBlock::new(rng, cfg, i == 0))
            .collect();
        let final_attn =
            DecoderAttention::new(rng, c, cfg.cross_attention_dim(), cfg.decoder_heads);
        let mut upscale = Vec::new();
        let mut cin = c;
        for cout in cfg.upscale_channels() {
            upscale.push(Linear::trainable(rng, cin, 4 * cout));
            cin = cout;
        }
        let cup = cfg.mask_feature_dim();
        Self {
            dim: c,
            mask_token: normal_vec(rng, c, 1.0),
            blocks,
            final_attn,
            final_norm: LayerNorm::new(c),
            upscale,
            pixel_proj: Linear::trainable(rng, 3, cup),
            hyper: vec![
                Linear::trainable(rng, c, c),
                Linear::trainable(rng, c, c),
                Linear::trainable(rng, c, cup),
            ],
        }
    }

    /// Decodes one mask. `features` and `image_pe` are `grid² × dim`,
    /// `prompt_token` is `dim`, `pixels` is `(H·W) × 3`.
    pub(crate) fn forward(
        &self,
        features: &[T],
        image_pe: &[T],
        prompt_token: &[T],
        pixels: &[T],
        grid: usize,
    ) -> (Vec<T>, DecoderCache<T>) {
        let c = self.dim;
        let nk = grid * grid;
        let mut tokens = self.mask_token.clone();
        tokens.extend_from_slice(prompt_token);
        let query_pe = tokens.clone();
        let mut queries = tokens;
        let mut keys = features.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (q, k, cache) = block.forward(Streams {
                queries: &queries,
                keys: &keys,
                query_pe: &query_pe,
                key_pe: image_pe,
                nq: 2,
                nk,
            });
            caches.push(cache);
            queries = q;
            keys = k;
        }
        let qp = ops::added(&queries, &query_pe);
        let kp = ops::added(&keys, image_pe);
        let (a, final_attn) = self.final_attn.forward(&qp, &kp, &keys, 2, nk);
        let (qf, final_norm) = self.final_norm.forward(&ops::added(&queries, &a));

        // upsampling head
        let mut x = keys;
        let mut side = grid;
        let mut stage_inputs = Vec::with_capacity(self.upscale.len());
        let mut stage_pre = Vec::with_capacity(self.upscale.len());
        for (i, lin) in self.upscale.iter().enumerate() {
            let cout = lin.out / 4;
            let y = lin.forward(&x, side * side);
            let mut pre = pixel_shuffle(&y, side, cout);
            side *= 2;
            if i + 1 == self.upscale.len() {
                let skip = self.pixel_proj.forward(pixels, side * side);
                ops::add_assign(&mut pre, &skip);
            }
            stage_inputs.push(x);
            x = pre.iter().map(|&v| ops::gelu(v)).collect();
            stage_pre.push(pre);
        }
        let features_hr = x;

        let mut h = qf[..c].to_vec();
        let mut hyper_inputs = Vec::with_capacity(3);
        let mut hyper_pre = Vec::with_capacity(3);
        for (i, lin) in self.hyper.iter().enumerate() {
            hyper_inputs.push(h.clone());
            let pre = lin.forward(&h, 1);
            h = if i + 1 < self.hyper.len() {
                pre.iter().map(|v| v.max(T::zero())).collect()
            } else {
                pre.clone()
            };
            hyper_pre.push(pre);
        }
        let cup = h.len();
        let logits: Vec<T> = features_hr
            .chunks(cup)
            .map(|f| f.iter().zip(&h).map(|(&a, &b)| a * b).sum())
            .collect();
        (
            logits,
            DecoderCache {
                grid,
                blocks: caches,
                final_attn,
                final_norm,
                stage_inputs,
                stage_pre,
                features: features_hr,
                hyper_inputs,
                hyper_pre,
                weights: h,
            },
        )
    }

    /// Returns gradients w.r.t. `(features, prompt_token)`.
    pub(crate) fn backward(
        &self,
        cache: &DecoderCache<T>,
        dlogits: &[T],
        pixels: &[T],
        grad: &mut MaskDecoder<T>,
    ) -> (Vec<T>, Vec<T>) {
        let c = self.dim;
        let cup = cache.weights.len();
        let mut dweights = vec![T::zero(); cup];
        let mut dfeat = vec![T::zero(); cache.features.len()];
        for (p, &g) in dlogits.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let f = &cache.features[p * cup..(p + 1) * cup];
            for j in 0..cup {
                dweights[j] += g * f[j];
                dfeat[p * cup + j] = g * cache.weights[j];
            }
        }

        // hypernetwork
        let mut dh = dweights;
        for (i, lin) in self.hyper.iter().enumerate().rev() {
            if i + 1 < self.hyper.len() {
                for (d, &p) in dh.iter_mut().zip(&cache.hyper_pre[i]) {
                    if p <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            dh = lin
                .backward(&cache.hyper_inputs[i], &dh, 1, &mut grad.hyper[i], true)
                .expect("dx");
        }
        let mut dqf = vec![T::zero(); 2 * c];
        dqf[..c].copy_from_slice(&dh);

        // upsampling head
        let mut dx = dfeat;
        let mut side = cache.grid << self.upscale.len();
        for (i, lin) in self.upscale.iter().enumerate().rev() {
            let cout = lin.out / 4;
            let mut dpre = dx;
            for (d, &p) in dpre.iter_mut().zip(&cache.stage_pre[i]) {
                *d *= ops::gelu_grad(p);
            }
            if i + 1 == self.upscale.len() {
                self.pixel_proj
                    .backward(pixels, &dpre, side * side, &mut grad.pixel_proj, false);
            }
            side /= 2;
            let dy = pixel_unshuffle(&dpre, side, cout);
            dx = lin
                .backward(
                    &cache.stage_inputs[i],
                    &dy,
                    side * side,
                    &mut grad.upscale[i],
                    true,
                )
                .expect("dx");
        }
        let mut dkeys = dx;

        // final token-to-image attention
        let dq = self
            .final_norm
            .backward(&cache.final_norm, &dqf, &mut grad.final_norm);
        let mut d_query_pe = vec![T::zero(); 2 * c];
        let (dqp, dkp, dv) = self
            .final_attn
            .backward(&cache.final_attn, &dq, &mut grad.final_attn);
        let mut dqueries = dq;
        ops::add_assign(&mut dqueries, &dqp);
        ops::add_assign(&mut d_query_pe, &dqp);
        ops::add_assign(&mut dkeys, &dkp);
        ops::add_assign(&mut dkeys, &dv);

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (dq, dk) = block.backward(
                &cache.blocks[i],
                &dqueries,
                &dkeys,
                &mut d_query_pe,
                &mut grad.blocks[i],
            );
            dqueries = dq;
            dkeys = dk;
        }
        ops::add_assign(&mut dqueries, &d_query_pe);
        ops::add_assign(&mut grad.mask_token, &dqueries[..c]);
        (dkeys, dqueries[c..].to_vec())
    }
}

impl<T: Scalar> ParamSet<T> for MaskDecoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(
            out,
            prefix,
            "mask_token",
            vec![self.dim],
            &self.mask_token,
            true,
        );
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_attn.collect(&join(prefix, "final_attn"), out);
        self.final_norm.collect(&join(prefix, "final_norm"), out);
        for (i, l) in self.upscale.iter().enumerate() {
            l.collect(&join(prefix, &format!("upscale.{i}")), out);
        }
        self.pixel_proj.collect(&join(prefix, "pixel_proj"), out);
        for (i, l) in self.hyper.iter().enumerate() {
            l.collect(&join(prefix, &format!("hyper.{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_mut(out, prefix, "mask_token", &mut self.mask_token, true);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_attn
            .collect_mut(&join(prefix, "final_attn"), out);
        self.final_norm
            .collect_mut(&join(prefix, "final_norm"), out);
        for (i, l) in self.upscale.iter_mut().enumerate() {
            l.collect_mut(&join(prefix, &format!("upscale.{i}")), out);
        }
        self.pixel_proj
            .collect_mut(&join(prefix, "pixel_proj"), out);
        for (i, l) in self.hyper.iter_mut().enumerate() {
            l.collect_mut(&join(prefix, &format!("hyper.{i}")), out);
        }
    }

    fn zero_grad(&self) -> Self {
        Self {
            dim: self.dim,
            mask_token: vec![T::zero(); self.dim],
            blocks: self.blocks.iter().map(|b| b.zero_grad()).collect(),
            final_attn: self.final_attn.zero_grad(),
            final_norm: self.final_norm.zero_grad(),
            upscale: self.upscale.iter().map(|l| l.zero_grad()).collect(),
            pixel_proj: self.pixel_proj.zero_grad(),
            hyper: self.hyper.iter().map(|l| l.zero_grad()).collect(),
        }
    }
}
