//! Baseline parameter-efficient tuning methods: parallel bottleneck adapters,
//! low-rank updates, prompt tokens, bias-only tuning, and the temperature gate
//! shared by the boosters.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::attention::{encoder_block, BlockInjections, BlockParams};
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::{Ctx, Init, Linear, ParamEntry, ParamId, ParamRegistry, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Finetune,
    BitFit,
    Prompt,
    Lora,
    Adapter,
    VlnPetl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Finetune,
        Method::BitFit,
        Method::Prompt,
        Method::Lora,
        Method::Adapter,
        Method::VlnPetl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::BitFit => "bitfit",
            Method::Prompt => "prompt",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::VlnPetl => "vln-petl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

/// Which parameters a tuning method may update.
#[derive(Clone, Debug)]
pub struct FreezeSpec {
    pub method: Method,
    /// Base parameters the method unfreezes anyway (layer norms hosting an adapter).
    pub extra_trainable: BTreeSet<ParamId>,
    /// Added parameters held fixed (a gate ablated to a constant weight).
    pub fixed_petl: BTreeSet<ParamId>,
}

impl FreezeSpec {
    pub fn new(method: Method) -> Self {
        FreezeSpec {
            method,
            extra_trainable: BTreeSet::new(),
            fixed_petl: BTreeSet::new(),
        }
    }

    pub fn is_trainable(&self, id: ParamId, entry: &ParamEntry) -> bool {
        if entry.role == Role::Head {
            return true;
        }
        match self.method {
            Method::Finetune => true,
            Method::BitFit => entry.role.is_bias(),
            _ => {
                (entry.role == Role::Petl && !self.fixed_petl.contains(&id))
                    || self.extra_trainable.contains(&id)
            }
        }
    }

    pub fn apply(&self, registry: &mut ParamRegistry) {
        let flags: Vec<(ParamId, bool)> = registry
            .iter()
            .map(|(id, e)| (id, self.is_trainable(id, e)))
            .collect();
        for (id, t) in flags {
            registry.set_trainable(id, t);
        }
    }
}

/// Bias-role base parameters plus the prediction head: what BitFit tunes.
pub fn bitfit_select(registry: &ParamRegistry) -> BTreeSet<String> {
    registry
        .entries()
        .iter()
        .filter(|e| e.role.is_bias() || e.role == Role::Head)
        .map(|e| e.name.clone())
        .collect()
}

/// Bottleneck `up(relu(down(x)))`, biases on both projections.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub down: Linear,
    pub up: Linear,
}

impl AdapterParams {
    /// Down-projection random, up-projection zero: the adapter starts as a no-op.
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, m: usize) -> Result<Self> {
        if m == 0 || m >= d {
            return Err(Error::Config(format!("adapter bottleneck {m} must be in 1..{d}")));
        }
        Ok(AdapterParams {
            down: Linear::new(reg, &format!("{prefix}.down"), d, m, true, Role::Petl, Linear::fan_in_init(d))?,
            up: Linear::new(reg, &format!("{prefix}.up"), m, d, true, Role::Petl, Init::Zeros)?,
        })
    }

    pub fn param_count(d: usize, m: usize) -> usize {
        2 * d * m + m + d
    }
}

pub fn adapter_forward(ctx: &mut Ctx<'_>, f_in: Var, p: &AdapterParams) -> Result<Var> {
    let h = p.down.forward(ctx, f_in)?;
    let h = ctx.tape.relu(h);
    p.up.forward(ctx, h)
}

/// Low-rank update `gamma · W_down W_up` riding on a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraParams {
    pub down: ParamId,
    pub up: ParamId,
    pub gamma: f64,
    pub rank: usize,
}

impl LoraParams {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, rank: usize, gamma: f64) -> Result<Self> {
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!("LoRA rank {rank} must be in 1..{d}")));
        }
        Ok(LoraParams {
            down: reg.add(format!("{prefix}.down"), &[d, rank], Role::Petl, Linear::fan_in_init(d))?,
            up: reg.add(format!("{prefix}.up"), &[rank, d], Role::Petl, Init::Zeros)?,
            gamma,
            rank,
        })
    }

    pub fn param_count(d: usize, rank: usize) -> usize {
        2 * d * rank
    }
}

/// LoRA pair for the query and value projections of one attention module.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub q: LoraParams,
    pub v: LoraParams,
}

impl LoraPair {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, rank: usize, gamma: f64) -> Result<Self> {
        Ok(LoraPair {
            q: LoraParams::new(reg, &format!("{prefix}.lora_q"), d, rank, gamma)?,
            v: LoraParams::new(reg, &format!("{prefix}.lora_v"), d, rank, gamma)?,
        })
    }
}

/// `f W + b + gamma · (f W_down) W_up`.
pub fn lora_linear(ctx: &mut Ctx<'_>, f_in: Var, base: &Linear, p: &LoraParams) -> Result<Var> {
    if p.rank >= base.d_in.min(base.d_out) {
        return Err(Error::Config(format!(
            "LoRA rank {} is not below width {}",
            p.rank, base.d_in
        )));
    }
    let frozen = base.forward(ctx, f_in)?;
    let down = ctx.param(p.down)?;
    let up = ctx.param(p.up)?;
    let low = ctx.tape.matmul(f_in, down)?;
    let low = ctx.tape.matmul(low, up)?;
    let low = ctx.tape.scale(low, p.gamma);
    ctx.tape.add(frozen, low)
}

/// Learnable continuous prompt tokens.
#[derive(Clone, Debug)]
pub struct PromptParams {
    pub prompts: Option<ParamId>,
    pub n_prompts: usize,
}

pub const PROMPT_INIT: Init = Init::Uniform(0.5);

impl PromptParams {
    pub fn new(reg: &mut ParamRegistry, name: &str, n_prompts: usize, d: usize) -> Result<Self> {
        let prompts = if n_prompts == 0 {
            None
        } else {
            Some(reg.add(name, &[n_prompts, d], Role::Petl, PROMPT_INIT)?)
        };
        Ok(PromptParams { prompts, n_prompts })
    }
}

/// `[prompts; f_in]`, adding `n_prompts` rows in front.
pub fn prompt_prepend(ctx: &mut Ctx<'_>, f_in: Var, p: &PromptParams) -> Result<Var> {
    match p.prompts {
        None => Ok(f_in),
        Some(id) => {
            let prompts = ctx.param(id)?;
            ctx.tape.concat_rows(&[prompts, f_in])
        }
    }
}

/// Learnable mixing weight `alpha = sigmoid(theta / T)`, `theta` starting at 0.
#[derive(Clone, Debug)]
pub struct GateParam {
    pub theta: ParamId,
    pub temperature: f64,
}

impl GateParam {
    pub fn new(reg: &mut ParamRegistry, name: &str, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("gate temperature must be positive, got {temperature}")));
        }
        Ok(GateParam {
            theta: reg.add(name, &[1], Role::Petl, Init::Zeros)?,
            temperature,
        })
    }

    pub fn alpha(&self, ctx: &mut Ctx<'_>) -> Result<Var> {
        let theta = ctx.param(self.theta)?;
        Ok(ctx.tape.sigmoid_scaled(theta, 1.0 / self.temperature))
    }
}

/// `alpha · a + (1 − alpha) · b`.
pub fn gate_mix(ctx: &mut Ctx<'_>, branch_a: Var, branch_b: Var, g: &GateParam) -> Result<Var> {
    let alpha = g.alpha(ctx)?;
    ctx.tape.lerp(branch_a, branch_b, alpha)
}

/// Language-encoder block with parallel adapters beside self-attention and FFN.
pub fn lea_block_forward(
    ctx: &mut Ctx<'_>,
    f_in: Var,
    p: &BlockParams,
    a_attn: &AdapterParams,
    a_ffn: &AdapterParams,
) -> Result<Var> {
    let inj = BlockInjections {
        attn_adapter: Some(a_attn.clone()),
        ffn_adapter: Some(a_ffn.clone()),
        lora: None,
    };
    encoder_block(ctx, f_in, p, &inj)
}
