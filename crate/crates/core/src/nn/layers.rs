//! Linear maps, multi-head attention, pre-norm transformer blocks and losses.

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::params::{Param, ParamSet};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

/// `x·W + b` row by row.
pub fn linear_apply<T: Real>(g: &mut Graph<T>, w: Tensor, b: Tensor, x: Tensor) -> Result<Tensor> {
    let (sw, sb, sx) = (g.shape(w), g.shape(b), g.shape(x));
    if sw.len() != 2 || sb != [sw[1]] || sx.len() != 2 || sx[1] != sw[0] {
        return Err(Error::Shape(format!("linear: x {sx:?}, W {sw:?}, b {sb:?}")));
    }
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Binds `<prefix>.w` / `<prefix>.b` and applies them.
pub fn linear<T: Real>(g: &mut Graph<T>, params: &ParamSet, prefix: &str, x: Tensor) -> Result<Tensor> {
    let w = params.bind(g, &format!("{prefix}.w"))?;
    let b = params.bind(g, &format!("{prefix}.b"))?;
    linear_apply(g, w, b, x)
}

/// Registers a `d_in × d_out` linear layer: normal weights (or zeros) and zero bias.
pub fn init_linear<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    zero_weights: bool,
    rng: &mut R,
) -> Result<()> {
    let w = if zero_weights {
        Param::zeros(&[d_in, d_out])
    } else {
        Param::normal(&[d_in, d_out], INIT_STD, rng)
    };
    params.insert(format!("{prefix}.w"), w)?;
    params.insert(format!("{prefix}.b"), Param::zeros(&[d_out]))
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    Ok(d / heads)
}

// softmax(q kᵀ / sqrt(dh)) v for one head
fn head_attend<T: Real>(g: &mut Graph<T>, q: Tensor, k: Tensor, v: Tensor, causal: bool, dh: usize) -> Result<Tensor> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, T::of(1.0 / (dh as f64).sqrt()));
    let a = if causal { g.causal_softmax(s)? } else { g.softmax(s, 1)? };
    g.matmul(a, v)
}

/// Scaled dot-product attention over `t × d` inputs, optionally causal.
pub fn attention_apply<T: Real>(
    g: &mut Graph<T>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sq != sk || sq != sv {
        return Err(Error::Shape(format!("attention q {sq:?} k {sk:?} v {sv:?}")));
    }
    let dh = check_heads(sq[1], heads)?;
    let (qs, ks, vs) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        outs.push(head_attend(g, qs[h], ks[h], vs[h], causal, dh)?);
    }
    g.concat_cols(&outs)
}

/// Causal attention over `[prefix; text]` rows where text queries see the
/// prefix through a separate softmax scaled by `gate`:
///
/// `out_text = causal_attn(text, text) + gate · attn(text, prefix)`.
///
/// Prefix rows attend causally among themselves. With `gate == 0` text rows
/// are bit-for-bit those of [`attention_apply`] on the text alone.
pub fn gated_prefix_attention<T: Real>(
    g: &mut Graph<T>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: usize,
    prefix_len: usize,
    gate: Tensor,
) -> Result<Tensor> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() || prefix_len > s[0] {
        return Err(Error::Shape(format!("gated attention over {s:?} with prefix {prefix_len}")));
    }
    let dh = check_heads(s[1], heads)?;
    let text_len = s[0] - prefix_len;
    let (qs, ks, vs) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut rows = Vec::with_capacity(2);
        let prefix_kv = if prefix_len > 0 {
            let qp = g.slice_rows(qs[h], 0, prefix_len)?;
            let kp = g.slice_rows(ks[h], 0, prefix_len)?;
            let vp = g.slice_rows(vs[h], 0, prefix_len)?;
            rows.push(head_attend(g, qp, kp, vp, true, dh)?);
            Some((kp, vp))
        } else {
            None
        };
        if text_len > 0 {
            let (qt, kt, vt) = if prefix_len > 0 {
                (
                    g.slice_rows(qs[h], prefix_len, text_len)?,
                    g.slice_rows(ks[h], prefix_len, text_len)?,
                    g.slice_rows(vs[h], prefix_len, text_len)?,
                )
            } else {
                (qs[h], ks[h], vs[h])
            };
            let own = head_attend(g, qt, kt, vt, true, dh)?;
            let out = match prefix_kv {
                Some((kp, vp)) => {
                    let cross = head_attend(g, qt, kp, vp, false, dh)?;
                    let gated = g.mul(cross, gate)?;
                    g.add(own, gated)?
                }
                None => own,
            };
            rows.push(out);
        }
        outs.push(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? });
    }
    g.concat_cols(&outs)
}

/// How a block's attention treats the leading rows of its input.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMode {
    Causal,
    GatedPrefix { prefix_len: usize, gate: Tensor },
}

pub fn init_block<R: Rng>(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{prefix}.{ln}.g"), Param::filled(&[d], 1.0))?;
        params.insert(format!("{prefix}.{ln}.b"), Param::zeros(&[d]))?;
    }
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), d, d, false, rng)?;
    }
    init_linear(params, &format!("{prefix}.mlp.fc"), d, 4 * d, false, rng)?;
    init_linear(params, &format!("{prefix}.mlp.proj"), 4 * d, d, false, rng)
}

/// Pre-norm block: `h = x + attn(LN(x))`, `out = h + mlp(LN(h))` with a GELU MLP of width 4d.
pub fn transformer_block_apply<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    prefix: &str,
    x: Tensor,
    heads: usize,
    mode: AttentionMode,
) -> Result<Tensor> {
    let bind = |g: &mut Graph<T>, s: &str| params.bind(g, &format!("{prefix}.{s}"));
    let (g1, b1) = (bind(g, "ln1.g")?, bind(g, "ln1.b")?);
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let q = linear(g, params, &format!("{prefix}.attn.q"), h)?;
    let k = linear(g, params, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, params, &format!("{prefix}.attn.v"), h)?;
    let a = match mode {
        AttentionMode::Causal => attention_apply(g, q, k, v, heads, true)?,
        AttentionMode::GatedPrefix { prefix_len, gate } => gated_prefix_attention(g, q, k, v, heads, prefix_len, gate)?,
    };
    let a = linear(g, params, &format!("{prefix}.attn.o"), a)?;
    let x = g.add(x, a)?;
    let (g2, b2) = (bind(g, "ln2.g")?, bind(g, "ln2.b")?);
    let h = g.layer_norm(x, g2, b2, LN_EPS)?;
    let h = linear(g, params, &format!("{prefix}.mlp.fc"), h)?;
    let h = g.gelu(h);
    let h = linear(g, params, &format!("{prefix}.mlp.proj"), h)?;
    g.add(x, h)
}

/// Mean negative log-softmax over rows whose target is not `ignore_index`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Tensor, targets: &[usize], ignore_index: usize) -> Result<Tensor> {
    g.cross_entropy(logits, targets, ignore_index)
}

pub fn mse_loss<T: Real>(g: &mut Graph<T>, pred: Tensor, target: Tensor) -> Result<Tensor> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape(format!(
            "mse pred {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}
