//! Sinusoidal positional encoding, multi-head self-attention, the encoder
//! layer and the sigmoid decoder head.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tcn::fan_in_uniform;
use crate::tensor::{Real, Tensor};

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Real>(seq_len: usize, d_model: usize) -> Tensor<T> {
    Tensor::from_fn(&[seq_len, d_model], |idx| {
        let (pos, dim) = (idx / d_model, idx % d_model);
        let pair = (dim / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        T::lit(if dim % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// `softmax(Q K^T / sqrt(d_k)) V` for `[n, d]` or `[B, n, d]` operands.
pub fn attention<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != ks.len() || qs.len() != vs.len() || !(2..=3).contains(&qs.len()) {
        return Err(invalid(format!("attention operands {qs:?}, {ks:?}, {vs:?}")));
    }
    let d_k = *qs.last().expect("rank >= 2");
    if ks.last() != Some(&d_k) {
        return Err(invalid(format!(
            "query dim {d_k} does not match key dim {}",
            ks.last().expect("rank >= 2")
        )));
    }
    let lift = |x: Var<'t, T>, s: &[usize]| if s.len() == 2 { x.reshape(&[1, s[0], s[1]]) } else { Ok(x) };
    let (q3, k3, v3) = (lift(q, &qs)?, lift(k, &ks)?, lift(v, &vs)?);
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let weights = q3.bmm(k3.transpose_last()?)?.scale(scale).softmax_rows();
    let out = weights.bmm(v3)?;
    if qs.len() == 2 {
        out.reshape(&[qs[0], vs[1]])
    } else {
        Ok(out)
    }
}

/// Affine map `x W + b` along the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), fan_in_uniform(&[d_in, d_out], d_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p[self.weight])?.add_suffix(p[self.bias])
    }
}

/// Two affine maps with a leaky ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub leak: f64,
}

impl FeedForward {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        hidden: usize,
        leak: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::init(store, &format!("{name}.0"), d_model, hidden, rng),
            outer: Linear::init(store, &format!("{name}.1"), hidden, d_model, rng),
            leak,
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let h = self.inner.forward(x, p)?.leaky_relu(T::lit(self.leak));
        self.outer.forward(h, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(invalid(format!("{heads} heads do not divide d_model {d_model}")));
        }
        let d_k = d_model / heads;
        Ok(Self {
            query: Linear::init(store, &format!("{name}.q"), d_model, heads * d_k, rng),
            key: Linear::init(store, &format!("{name}.k"), d_model, heads * d_k, rng),
            value: Linear::init(store, &format!("{name}.v"), d_model, heads * d_k, rng),
            output: Linear::init(store, &format!("{name}.o"), heads * d_k, d_model, rng),
            heads,
            d_model,
            d_k,
            d_v: d_k,
        })
    }
}

/// Self-attention with `heads` independent projections, concatenated and
/// mixed by the output projection. `x` is `[B, n, d_model]`.
pub fn multi_head<'t, T: Real>(x: Var<'t, T>, params: &AttentionParams, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let [batch, n, d] = s[..] else {
        return Err(invalid(format!("multi-head attention expects [B, n, d], got {s:?}")));
    };
    if d != params.d_model {
        return Err(invalid(format!("input dim {d} != d_model {}", params.d_model)));
    }
    let h = params.heads;
    let split = |lin: &Linear, width: usize| -> Result<Var<'t, T>> {
        lin.forward(x, p)?
            .reshape(&[batch, n, h, width])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * h, n, width])
    };
    let q = split(&params.query, params.d_k)?;
    let k = split(&params.key, params.d_k)?;
    let v = split(&params.value, params.d_v)?;
    let heads = attention(q, k, v)?
        .reshape(&[batch, h, n, params.d_v])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, n, h * params.d_v])?;
    params.output.forward(heads, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p[self.gain], p[self.bias], T::lit(self.eps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub ffn: FeedForward,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub dropout: f64,
}

impl EncoderLayerParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        leak: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ffn: FeedForward::init(store, &format!("{name}.ffn"), d_model, hidden, leak, rng),
            norm1: LayerNormParams::init(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNormParams::init(store, &format!("{name}.norm2"), d_model),
            dropout,
        })
    }
}

/// `I1 = LN(I + MHA(I))`, `I2 = LN(I1 + FFN(I1))`, dropout after each sublayer.
pub fn encoder_layer<'t, T: Real, R: Rng + ?Sized>(
    input: Var<'t, T>,
    params: &EncoderLayerParams,
    p: &Bound<'t, T>,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let attn = multi_head(input, &params.attention, p)?.dropout(params.dropout, training, rng)?;
    let i1 = params.norm1.forward(input.add(attn)?, p)?;
    let ff = params.ffn.forward(i1, p)?.dropout(params.dropout, training, rng)?;
    params.norm2.forward(i1.add(ff)?, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHeadParams {
    pub residual: FeedForward,
    pub output: FeedForward,
}

impl DecoderHeadParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        hidden: usize,
        leak: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            residual: FeedForward::init(store, &format!("{name}.residual"), d_model, hidden, leak, rng),
            output: FeedForward::init(store, &format!("{name}.output"), d_model, hidden, leak, rng),
        }
    }
}

/// `I3 = I2 + FFN(I2)`, `O = sigmoid(FFN(I3))`.
pub fn decoder_head<'t, T: Real>(input: Var<'t, T>, params: &DecoderHeadParams, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let i3 = input.add(params.residual.forward(input, p)?)?;
    Ok(params.output.forward(i3, p)?.sigmoid())
}
