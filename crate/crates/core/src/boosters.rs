//! Bottleneck cross-attention boosters with learnable gates.
//!
//! The history booster lets the current panorama attend over the accumulated
//! history tokens; the cross-modal booster exchanges queries between the text
//! and visual streams. Both add their result back through a zero-initialised
//! up-projection and a fresh identity layer norm, so they are transparent when
//! installed.

use crate::attention::{
    cross_modal_block, encoder_block, multi_head_attention, AttentionParams, BlockInjections, BlockParams,
    CrossBlockParams, CrossInjections,
};
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::{Ctx, Init, Linear, Norm, ParamRegistry, Role};
use crate::petl::{gate_mix, GateParam};

/// Default number of heads in the bottleneck attention.
pub const BOOSTER_HEADS: usize = 4;

fn check_dims(d: usize, m: usize, n_heads: usize) -> Result<()> {
    if m == 0 || m >= d {
        return Err(Error::Config(format!("booster bottleneck {m} must be in 1..{d}")));
    }
    if n_heads == 0 || !m.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("{n_heads} booster heads do not divide bottleneck {m}")));
    }
    Ok(())
}

/// One gated branch: query stream down-projection, bottleneck attention over the
/// other stream, gate, up-projection and output norm.
#[derive(Clone, Debug)]
pub struct BoosterBranch {
    pub down: Linear,
    pub mha: AttentionParams,
    pub gate: GateParam,
    pub up: Linear,
    pub out_norm: Norm,
}

impl BoosterBranch {
    fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, m: usize, n_heads: usize, temperature: f64) -> Result<Self> {
        Ok(BoosterBranch {
            down: Linear::new(reg, &format!("{prefix}.down"), d, m, true, Role::Petl, Linear::fan_in_init(d))?,
            mha: AttentionParams::new(reg, &format!("{prefix}.mha"), m, n_heads, Role::Petl)?,
            gate: GateParam::new(reg, &format!("{prefix}.gate"), temperature)?,
            up: Linear::new(reg, &format!("{prefix}.up"), m, d, true, Role::Petl, Init::Zeros)?,
            out_norm: Norm::new(reg, &format!("{prefix}.out_norm"), d, Role::Petl, Role::Petl)?,
        })
    }

    /// `LN(host + up(gate_mix(relu(q_down), MHA(q_down, kv_down))))`.
    fn apply(&self, ctx: &mut Ctx<'_>, host: Var, q_down: Var, kv_down: Var) -> Result<Var> {
        let relu = ctx.tape.relu(q_down);
        let cross = multi_head_attention(ctx, q_down, kv_down, &self.mha, None, None)?;
        let mixed = gate_mix(ctx, relu, cross, &self.gate)?;
        let up = self.up.forward(ctx, mixed)?;
        let sum = ctx.tape.add(host, up)?;
        self.out_norm.forward(ctx, sum)
    }
}

#[derive(Clone, Debug)]
pub struct HibParams {
    pub branch: BoosterBranch,
    pub down_h: Linear,
}

impl HibParams {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        n_heads: usize,
        temperature: f64,
    ) -> Result<Self> {
        check_dims(d, m, n_heads)?;
        let branch = BoosterBranch::new(reg, prefix, d, m, n_heads, temperature)?;
        let down_h = Linear::new(reg, &format!("{prefix}.down_h"), d, m, true, Role::Petl, Linear::fan_in_init(d))?;
        Ok(HibParams { branch, down_h })
    }
}

/// History-stream block with the booster attached. `f_prev` is the block input,
/// `h_prev` the history token sequence (start token included).
pub fn hib_forward(
    ctx: &mut Ctx<'_>,
    f_prev: Var,
    h_prev: Var,
    block: &BlockParams,
    inj: &BlockInjections,
    p: &HibParams,
) -> Result<Var> {
    if ctx.value(h_prev).rows() == 0 {
        return Err(Error::Contract("history booster needs at least one history token".into()));
    }
    let host = encoder_block(ctx, f_prev, block, inj)?;
    let f_down = p.branch.down.forward(ctx, f_prev)?;
    let h_down = p.down_h.forward(ctx, h_prev)?;
    p.branch.apply(ctx, host, f_down, h_down)
}

#[derive(Clone, Debug)]
pub struct CibParams {
    pub text: BoosterBranch,
    pub vis: BoosterBranch,
}

impl CibParams {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        m: usize,
        n_heads: usize,
        temperature: f64,
    ) -> Result<Self> {
        check_dims(d, m, n_heads)?;
        Ok(CibParams {
            text: BoosterBranch::new(reg, &format!("{prefix}.text"), d, m, n_heads, temperature)?,
            vis: BoosterBranch::new(reg, &format!("{prefix}.vis"), d, m, n_heads, temperature)?,
        })
    }
}

/// Cross-modal block with the two-stream booster attached.
pub fn cib_forward(
    ctx: &mut Ctx<'_>,
    f_x: Var,
    f_v: Var,
    block: &CrossBlockParams,
    inj: &CrossInjections,
    p: &CibParams,
) -> Result<(Var, Var)> {
    let (host_x, host_v) = cross_modal_block(ctx, f_x, f_v, block, inj)?;
    let x_down = p.text.down.forward(ctx, f_x)?;
    let v_down = p.vis.down.forward(ctx, f_v)?;
    let out_x = p.text.apply(ctx, host_x, x_down, v_down)?;
    let out_v = p.vis.apply(ctx, host_v, v_down, x_down)?;
    Ok((out_x, out_v))
}

/// Closed-form parameter count of one booster.
pub fn booster_param_count(d: usize, m: usize, n_heads: usize, with_two_streams: bool) -> Result<usize> {
    check_dims(d, m, n_heads)?;
    let down = d * m + m;
    let mha = 4 * (m * m + m);
    let gate = 1;
    let up = m * d + d;
    let norm = 2 * d;
    let branch = down + mha + gate + up + norm;
    Ok(if with_two_streams { 2 * branch } else { branch + down })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_worked_example() {
        // down 2·(8·4+4), attention 4·(16+4), gate 1, up 4·8+8, norm 2·8
        assert_eq!(booster_param_count(8, 4, 2, false).unwrap(), 72 + 80 + 1 + 40 + 16);
        assert_eq!(booster_param_count(8, 4, 2, true).unwrap(), 2 * (209 - 36));
    }

    #[test]
    fn full_width_bottleneck_rejected() {
        assert!(matches!(booster_param_count(8, 8, 2, false), Err(Error::Config(_))));
        assert!(matches!(booster_param_count(8, 6, 4, false), Err(Error::Config(_))));
    }
}
