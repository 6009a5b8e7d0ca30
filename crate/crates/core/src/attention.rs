//! Multi-head attention, the feed-forward sublayer and the post-norm transformer
//! blocks that host the tuning modules.

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::{Ctx, Linear, Norm, ParamRegistry, Role};
use crate::petl::{adapter_forward, lora_linear, AdapterParams, LoraPair, LoraParams};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d: usize,
}

impl AttentionParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, n_heads: usize, role: Role) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
        }
        let init = Linear::fan_in_init(d);
        let mut lin = |name: &str| Linear::new(reg, &format!("{prefix}.{name}"), d, d, true, role, init);
        Ok(AttentionParams {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            n_heads,
            d,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * (d * d + d)
    }
}

fn project(ctx: &mut Ctx<'_>, x: Var, base: &Linear, lora: Option<&LoraParams>) -> Result<Var> {
    match lora {
        Some(l) => lora_linear(ctx, x, base, l),
        None => base.forward(ctx, x),
    }
}

/// Scaled dot-product attention, `q_src` attending over `kv_src`.
pub fn multi_head_attention(
    ctx: &mut Ctx<'_>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    lora_q: Option<&LoraParams>,
    lora_v: Option<&LoraParams>,
) -> Result<Var> {
    multi_head_attention_with_weights(ctx, q_src, kv_src, p, lora_q, lora_v).map(|(out, _)| out)
}

/// As [`multi_head_attention`], also returning each head's `L_q × L_kv` weight matrix.
pub fn multi_head_attention_with_weights(
    ctx: &mut Ctx<'_>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    lora_q: Option<&LoraParams>,
    lora_v: Option<&LoraParams>,
) -> Result<(Var, Vec<Var>)> {
    if p.n_heads == 0 || !p.d.is_multiple_of(p.n_heads) {
        return Err(Error::Config(format!("{} heads do not divide width {}", p.n_heads, p.d)));
    }
    let q = project(ctx, q_src, &p.q, lora_q)?;
    let k = p.k.forward(ctx, kv_src)?;
    let v = project(ctx, kv_src, &p.v, lora_v)?;
    let dh = p.d / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (qh, kh, vh) = if p.n_heads == 1 {
            (q, k, v)
        } else {
            (
                ctx.tape.slice_cols(q, h * dh, dh)?,
                ctx.tape.slice_cols(k, h * dh, dh)?,
                ctx.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = ctx.tape.matmul_nt(qh, kh)?;
        let scores = ctx.tape.scale(scores, scale);
        let w = ctx.tape.softmax_rows(scores);
        heads.push(ctx.tape.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.tape.concat_cols(&heads)?
    };
    Ok((p.o.forward(ctx, merged)?, weights))
}

/// `d → 4d → d` with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub const FFN_MULT: usize = 4;

impl FeedForward {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize) -> Result<Self> {
        let inner = FFN_MULT * d;
        Ok(FeedForward {
            up: Linear::new(reg, &format!("{prefix}.up"), d, inner, true, Role::Weight, Linear::fan_in_init(d))?,
            down: Linear::new(reg, &format!("{prefix}.down"), inner, d, true, Role::Weight, Linear::fan_in_init(inner))?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        let inner = FFN_MULT * d;
        d * inner + inner + inner * d + d
    }
}

pub fn feed_forward(ctx: &mut Ctx<'_>, x: Var, p: &FeedForward) -> Result<Var> {
    let h = p.up.forward(ctx, x)?;
    let h = ctx.tape.gelu(h);
    p.down.forward(ctx, h)
}

/// Self-attention and FFN sublayers, each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub attn_norm: Norm,
    pub ffn: FeedForward,
    pub ffn_norm: Norm,
}

impl BlockParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(BlockParams {
            attn: AttentionParams::new(reg, &format!("{prefix}.attn"), d, n_heads, Role::Weight)?,
            attn_norm: Norm::base(reg, &format!("{prefix}.attn_norm"), d)?,
            ffn: FeedForward::new(reg, &format!("{prefix}.ffn"), d)?,
            ffn_norm: Norm::base(reg, &format!("{prefix}.ffn_norm"), d)?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        AttentionParams::param_count(d) + FeedForward::param_count(d) + 4 * d
    }
}

/// Tuning modules attached to one encoder block.
#[derive(Clone, Debug, Default)]
pub struct BlockInjections {
    pub attn_adapter: Option<AdapterParams>,
    pub ffn_adapter: Option<AdapterParams>,
    pub lora: Option<LoraPair>,
}

/// `LN(x + sub(x) [+ adapter(x)])`.
fn residual_norm(ctx: &mut Ctx<'_>, x: Var, sub: Var, adapter: Option<&AdapterParams>, norm: &Norm) -> Result<Var> {
    let mut r = ctx.tape.add(x, sub)?;
    if let Some(a) = adapter {
        let side = adapter_forward(ctx, x, a)?;
        r = ctx.tape.add(r, side)?;
    }
    norm.forward(ctx, r)
}

pub fn encoder_block(ctx: &mut Ctx<'_>, x: Var, p: &BlockParams, inj: &BlockInjections) -> Result<Var> {
    let a = multi_head_attention(
        ctx,
        x,
        x,
        &p.attn,
        inj.lora.as_ref().map(|l| &l.q),
        inj.lora.as_ref().map(|l| &l.v),
    )?;
    let h = residual_norm(ctx, x, a, inj.attn_adapter.as_ref(), &p.attn_norm)?;
    let f = feed_forward(ctx, h, &p.ffn)?;
    residual_norm(ctx, h, f, inj.ffn_adapter.as_ref(), &p.ffn_norm)
}

/// Per-stream sublayers of a cross-modal block.
#[derive(Clone, Debug)]
pub struct StreamParams {
    pub cross_norm: Norm,
    pub self_attn: AttentionParams,
    pub self_norm: Norm,
    pub ffn: FeedForward,
    pub ffn_norm: Norm,
}

impl StreamParams {
    fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(StreamParams {
            cross_norm: Norm::base(reg, &format!("{prefix}.cross_norm"), d)?,
            self_attn: AttentionParams::new(reg, &format!("{prefix}.self_attn"), d, n_heads, Role::Weight)?,
            self_norm: Norm::base(reg, &format!("{prefix}.self_norm"), d)?,
            ffn: FeedForward::new(reg, &format!("{prefix}.ffn"), d)?,
            ffn_norm: Norm::base(reg, &format!("{prefix}.ffn_norm"), d)?,
        })
    }

    fn param_count(d: usize) -> usize {
        AttentionParams::param_count(d) + FeedForward::param_count(d) + 6 * d
    }
}

/// Two-stream block: one cross-attention module shared by both directions,
/// then per-stream self-attention and FFN.
#[derive(Clone, Debug)]
pub struct CrossBlockParams {
    pub cross_attn: AttentionParams,
    pub text: StreamParams,
    pub vis: StreamParams,
}

impl CrossBlockParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(CrossBlockParams {
            cross_attn: AttentionParams::new(reg, &format!("{prefix}.cross_attn"), d, n_heads, Role::Weight)?,
            text: StreamParams::new(reg, &format!("{prefix}.text"), d, n_heads)?,
            vis: StreamParams::new(reg, &format!("{prefix}.vis"), d, n_heads)?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        AttentionParams::param_count(d) + 2 * StreamParams::param_count(d)
    }
}

#[derive(Clone, Debug, Default)]
pub struct StreamInjections {
    pub cross_adapter: Option<AdapterParams>,
    pub self_adapter: Option<AdapterParams>,
    pub ffn_adapter: Option<AdapterParams>,
    pub self_lora: Option<LoraPair>,
}

#[derive(Clone, Debug, Default)]
pub struct CrossInjections {
    pub cross_lora: Option<LoraPair>,
    pub text: StreamInjections,
    pub vis: StreamInjections,
}

fn stream_tail(ctx: &mut Ctx<'_>, x: Var, p: &StreamParams, inj: &StreamInjections) -> Result<Var> {
    let a = multi_head_attention(
        ctx,
        x,
        x,
        &p.self_attn,
        inj.self_lora.as_ref().map(|l| &l.q),
        inj.self_lora.as_ref().map(|l| &l.v),
    )?;
    let h = residual_norm(ctx, x, a, inj.self_adapter.as_ref(), &p.self_norm)?;
    let f = feed_forward(ctx, h, &p.ffn)?;
    residual_norm(ctx, h, f, inj.ffn_adapter.as_ref(), &p.ffn_norm)
}

pub fn cross_modal_block(
    ctx: &mut Ctx<'_>,
    x_text: Var,
    x_vis: Var,
    p: &CrossBlockParams,
    inj: &CrossInjections,
) -> Result<(Var, Var)> {
    for (v, what) in [(x_text, "text"), (x_vis, "visual")] {
        if ctx.value(v).rows() == 0 {
            return Err(Error::Contract(format!("empty {what} stream")));
        }
    }
    let lq = inj.cross_lora.as_ref().map(|l| &l.q);
    let lv = inj.cross_lora.as_ref().map(|l| &l.v);
    let ct = multi_head_attention(ctx, x_text, x_vis, &p.cross_attn, lq, lv)?;
    let cv = multi_head_attention(ctx, x_vis, x_text, &p.cross_attn, lq, lv)?;
    let t = residual_norm(ctx, x_text, ct, inj.text.cross_adapter.as_ref(), &p.text.cross_norm)?;
    let v = residual_norm(ctx, x_vis, cv, inj.vis.cross_adapter.as_ref(), &p.vis.cross_norm)?;
    let t = stream_tail(ctx, t, &p.text, &inj.text)?;
    let v = stream_tail(ctx, v, &p.vis, &inj.vis)?;
    Ok((t, v))
}
