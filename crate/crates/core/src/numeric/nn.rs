//! Layers built from graph operations. Each layer owns parameter ids into a
//! [`ParamStore`]; `forward` records onto a [`Graph`].

use rand::Rng;

use super::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        let weight = store.add_linear_weight(&format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = if bias { Some(store.add_filled(&format!("{name}.bias"), &[1, fan_out], 0.0)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericError> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NumericError> {
        let gain = store.add_filled(&format!("{name}.gain"), &[1, dim], 1.0)?;
        let bias = store.add_filled(&format!("{name}.bias"), &[1, dim], 0.0)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericError> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Scaled dot-product attention split over `heads` column blocks of q, k, v
/// (already projected). `mask` is row-major Lq×Lk; false blocks a key.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var, NumericError> {
    let (lq, d) = g.shape(q);
    let (lk, dk_all) = g.shape(k);
    if dk_all != d || g.shape(v) != (lk, d) {
        return Err(NumericError::Shape { op: "attention", left: vec![lq, d], right: vec![lk, dk_all] });
    }
    if heads == 0 || d % heads != 0 {
        return Err(NumericError::HeadCount { d, heads });
    }
    if let Some(m) = mask {
        if m.len() != lq * lk {
            return Err(NumericError::MaskShape { expected: lq * lk, got: m.len() });
        }
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dk, dk)?, g.slice_cols(k, h * dk, dk)?, g.slice_cols(v, h * dk, dk)?)
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, mask)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Causal mask for n positions: row i sees columns 0..=i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericError::HeadCount { d, heads });
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, mask: Option<&[bool]>) -> Result<Var, NumericError> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let heads = attention(g, q, k, v, self.heads, mask)?;
        self.output.forward(g, heads)
    }
}

/// Row-wise two-way softmax gate. Returns the mixed rows and the L×2 weights.
pub fn two_way_gate(g: &mut Graph, q: Var, k1: Var, v1: Var, k2: Var, v2: Var) -> Result<(Var, Var), NumericError> {
    let s1 = g.mul(q, k1)?;
    let s1 = g.sum_cols(s1);
    let s2 = g.mul(q, k2)?;
    let s2 = g.sum_cols(s2);
    let logits = g.concat_cols(&[s1, s2])?;
    let weights = g.softmax(logits, None)?;
    let a1 = g.slice_cols(weights, 0, 1)?;
    let a2 = g.slice_cols(weights, 1, 1)?;
    let m1 = g.mul_col(v1, a1)?;
    let m2 = g.mul_col(v2, a2)?;
    Ok((g.add(m1, m2)?, weights))
}

/// Per-head gate: q and both key/value pairs are split into `heads` column
/// blocks, each gated independently and concatenated back.
pub fn multi_head_gate(
    g: &mut Graph,
    q: Var,
    k1: Var,
    v1: Var,
    k2: Var,
    v2: Var,
    heads: usize,
) -> Result<Var, NumericError> {
    let (_, d) = g.shape(q);
    if heads == 0 || d % heads != 0 {
        return Err(NumericError::HeadCount { d, heads });
    }
    if heads == 1 {
        return Ok(two_way_gate(g, q, k1, v1, k2, v2)?.0);
    }
    let dk = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let parts: Vec<Var> = [q, k1, v1, k2, v2]
            .iter()
            .map(|&x| g.slice_cols(x, h * dk, dk))
            .collect::<Result<_, _>>()?;
        outs.push(two_way_gate(g, parts[0], parts[1], parts[2], parts[3], parts[4])?.0);
    }
    g.concat_cols(&outs)
}

/// Depthwise convolution over the sequence axis followed by a 1×1 mix.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: Linear,
    pub window: usize,
}

impl SeparableConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        if window.is_multiple_of(2) {
            return Err(NumericError::EvenWindow(window));
        }
        let depthwise = store.add_linear_weight(&format!("{name}.depthwise"), window, d, rng)?;
        let pointwise = Linear::new(store, &format!("{name}.pointwise"), d, d, true, rng)?;
        Ok(SeparableConv { depthwise, pointwise, window })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericError> {
        let w = g.param(self.depthwise);
        let y = g.depthwise_conv(x, w)?;
        self.pointwise.forward(g, y)
    }
}

/// Sinusoidal embedding of position i in block b: even dims use
/// sin((i+b)/10000^(2j/d)). Odd dims use cos of the same angle, or sin when
/// `literal` is set.
pub fn position_embedding(i: usize, b: usize, d: usize, literal: bool) -> Vec<f64> {
    let pos = (i + b) as f64;
    (0..d)
        .map(|k| {
            let j = k / 2;
            let angle = pos / 10000f64.powf(2.0 * j as f64 / d as f64);
            if k % 2 == 0 || literal {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn position_matrix(len: usize, b: usize, d: usize, literal: bool) -> Tensor {
    let data = (0..len).flat_map(|i| position_embedding(i, b, d, literal)).collect();
    Tensor::new(vec![len, d], data).expect("len and d are positive")
}

/// Gating sub-layer: queries, keys and values from the main stream and from
/// a second feature source, mixed per head and projected back to d.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub query: Linear,
    pub key_main: Linear,
    pub value_main: Linear,
    pub key_other: Linear,
    pub value_other: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl GateLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericError::HeadCount { d, heads });
        }
        Ok(GateLayer {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng)?,
            key_main: Linear::new(store, &format!("{name}.key_main"), d, d, false, rng)?,
            value_main: Linear::new(store, &format!("{name}.value_main"), d, d, false, rng)?,
            key_other: Linear::new(store, &format!("{name}.key_other"), d, d, false, rng)?,
            value_other: Linear::new(store, &format!("{name}.value_other"), d, d, false, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, main: Var, other: Var) -> Result<Var, NumericError> {
        if g.shape(main) != g.shape(other) {
            let (a, b) = (g.shape(main), g.shape(other));
            return Err(NumericError::Shape { op: "gate", left: vec![a.0, a.1], right: vec![b.0, b.1] });
        }
        let q = self.query.forward(g, main)?;
        let k1 = self.key_main.forward(g, main)?;
        let v1 = self.value_main.forward(g, main)?;
        let k2 = self.key_other.forward(g, other)?;
        let v2 = self.value_other.forward(g, other)?;
        let mixed = multi_head_gate(g, q, k1, v1, k2, v2, self.heads)?;
        self.output.forward(g, mixed)
    }
}

/// Two dense layers with GELU after the first.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericError> {
        let h = self.inner.forward(g, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }
}

/// `norm(x + dropout(sub))`
pub fn residual_norm(g: &mut Graph, x: Var, sub: Var, norm: &LayerNorm, dropout: f64) -> Result<Var, NumericError> {
    let sub = g.dropout(sub, dropout)?;
    let sum = g.add(x, sub)?;
    norm.forward(g, sum)
}
