//! The frozen three-encoder navigation transformer.
//!
//! A language encoder embeds the instruction once per episode. Each step the
//! current panorama is embedded as observation tokens, the previous panorama
//! and turn are encoded into one more history token, and a two-stream
//! cross-modal encoder fuses text with `[history; observation]`. A linear head
//! scores the navigable views and a learned STOP embedding.
//!
//! Base parameters are registered first, in a fixed order, so two models built
//! from the same seed share bit-identical base weights whatever tuning method
//! is installed afterwards.

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_size, decode_checkpoint_into, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Components, MethodConfig, ModelConfig};

use crate::attention::{
    cross_modal_block, encoder_block, BlockInjections, BlockParams, CrossBlockParams, CrossInjections, StreamInjections,
};
use crate::boosters::{cib_forward, hib_forward, CibParams, HibParams};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Ctx, Init, Linear, Norm, ParamId, ParamRegistry, Role};
use crate::world::angle_features;
use crate::petl::{prompt_prepend, AdapterParams, FreezeSpec, LoraPair, Method, PromptParams};

/// Angle feature of "no rotation", used before the first action.
pub fn zero_action_angle(d_ang: usize) -> Tensor {
    Tensor::vector(angle_features(0.0, 0.0, d_ang)).expect("d_ang is positive")
}

#[derive(Clone, Debug)]
struct LanguageEncoder {
    word_emb: ParamId,
    pos_emb: ParamId,
    type_emb: ParamId,
    norm: Norm,
    blocks: Vec<BlockParams>,
}

/// `LN(W_v v + b) + LN(W_a a + b)`.
#[derive(Clone, Debug)]
struct PanoramaEmbedding {
    img: Linear,
    img_norm: Norm,
    ang: Linear,
    ang_norm: Norm,
}

impl PanoramaEmbedding {
    fn new(reg: &mut ParamRegistry, prefix: &str, c: &ModelConfig) -> Result<Self> {
        Ok(PanoramaEmbedding {
            img: Linear::new(reg, &format!("{prefix}.img"), c.d_img, c.d_hidden, true, Role::Weight, Linear::fan_in_init(c.d_img))?,
            img_norm: Norm::base(reg, &format!("{prefix}.img_norm"), c.d_hidden)?,
            ang: Linear::new(reg, &format!("{prefix}.ang"), c.d_ang, c.d_hidden, true, Role::Weight, Linear::fan_in_init(c.d_ang))?,
            ang_norm: Norm::base(reg, &format!("{prefix}.ang_norm"), c.d_hidden)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_>, views: &Tensor, angles: &Tensor) -> Result<Var> {
        if views.cols() != self.img.d_in {
            return Err(Error::shape("panorama features", views.shape(), &[views.rows(), self.img.d_in]));
        }
        if angles.cols() != self.ang.d_in {
            return Err(Error::shape("angle features", angles.shape(), &[angles.rows(), self.ang.d_in]));
        }
        let v = ctx.input(views.clone());
        let v = self.img.forward(ctx, v)?;
        let v = self.img_norm.forward(ctx, v)?;
        let a = ctx.input(angles.clone());
        let a = self.ang.forward(ctx, a)?;
        let a = self.ang_norm.forward(ctx, a)?;
        if angles.rows() == views.rows() {
            ctx.tape.add(v, a)
        } else if angles.rows() == 1 {
            ctx.tape.add_row(v, a)
        } else {
            Err(Error::shape("panorama embedding", views.shape(), angles.shape()))
        }
    }
}

#[derive(Clone, Debug)]
struct HistoryEncoder {
    embed: PanoramaEmbedding,
    step_emb: ParamId,
    start: ParamId,
    blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
struct ActionHead {
    score: Linear,
    stop: ParamId,
}

/// Modules added by [`Model::install`].
#[derive(Clone, Debug)]
pub struct Installed {
    pub config: MethodConfig,
    pub freeze: FreezeSpec,
    lang: Vec<BlockInjections>,
    hist: Vec<BlockInjections>,
    cross: Vec<CrossInjections>,
    hib: Vec<HibParams>,
    cib: Vec<CibParams>,
    lang_prompts: PromptParams,
    hist_prompts: PromptParams,
}

impl Installed {
    pub fn hib(&self) -> &[HibParams] {
        &self.hib
    }

    pub fn cib(&self) -> &[CibParams] {
        &self.cib
    }

    /// Prompt tokens prepended to the language and history encoder inputs.
    pub fn prompt_counts(&self) -> (usize, usize) {
        let n = |p: &PromptParams| if p.prompts.is_some() { p.n_prompts } else { 0 };
        (n(&self.lang_prompts), n(&self.hist_prompts))
    }
}

/// Per-episode recurrent state. Holds tape handles, so it lives as long as one [`Ctx`].
#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub t: usize,
    pub node: usize,
    pub done: bool,
    history: Vec<Var>,
}

impl EpisodeState {
    /// `⟨h_0, …, h_t⟩`, one `1 × d` row each.
    pub fn history(&self) -> &[Var] {
        &self.history
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn frozen(&self) -> usize {
        self.total - self.trainable
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.total as f64
    }
}

pub fn count_trainable(registry: &ParamRegistry) -> ParamCount {
    ParamCount {
        trainable: registry.trainable_count(),
        total: registry.total_count(),
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    registry: ParamRegistry,
    lang: LanguageEncoder,
    obs: PanoramaEmbedding,
    hist: HistoryEncoder,
    cross: Vec<CrossBlockParams>,
    head: ActionHead,
    installed: Option<Installed>,
}

impl Model {
    /// Randomly initialised base model with every parameter frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamRegistry::new(seed))
    }

    /// Shapes only, for parameter accounting at sizes too large to allocate.
    pub fn new_virtual(config: ModelConfig) -> Result<Self> {
        Self::build(config, ParamRegistry::new_virtual())
    }

    fn build(config: ModelConfig, mut reg: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_hidden;
        let emb_init = Init::Uniform(1.0);
        let lang = LanguageEncoder {
            word_emb: reg.add("lang.emb.word", &[c.vocab_size, d], Role::Weight, emb_init)?,
            pos_emb: reg.add("lang.emb.pos", &[c.max_instr_len, d], Role::Weight, emb_init)?,
            type_emb: reg.add("lang.emb.type", &[2, d], Role::Weight, emb_init)?,
            norm: Norm::base(&mut reg, "lang.emb.norm", d)?,
            blocks: (0..c.n_lang_layers)
                .map(|i| BlockParams::new(&mut reg, &format!("lang.layer{i}"), d, c.n_heads))
                .collect::<Result<_>>()?,
        };
        let obs = PanoramaEmbedding::new(&mut reg, "obs", c)?;
        let hist = HistoryEncoder {
            embed: PanoramaEmbedding::new(&mut reg, "hist", c)?,
            step_emb: reg.add("hist.step_emb", &[c.max_history, d], Role::Weight, emb_init)?,
            start: reg.add("hist.start", &[1, d], Role::Weight, emb_init)?,
            blocks: (0..c.n_hist_layers)
                .map(|i| BlockParams::new(&mut reg, &format!("hist.layer{i}"), d, c.n_heads))
                .collect::<Result<_>>()?,
        };
        let cross = (0..c.n_cross_layers)
            .map(|i| CrossBlockParams::new(&mut reg, &format!("cross.layer{i}"), d, c.n_heads))
            .collect::<Result<_>>()?;
        let head = ActionHead {
            score: Linear::new(&mut reg, "head.score", d, 1, true, Role::Head, Linear::fan_in_init(d))?,
            stop: reg.add("head.stop", &[d], Role::Head, Init::Uniform(1.0))?,
        };
        Ok(Model {
            config,
            registry: reg,
            lang,
            obs,
            hist,
            cross,
            head,
            installed: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    pub fn installed(&self) -> Option<&Installed> {
        self.installed.as_ref()
    }

    pub fn method(&self) -> Option<Method> {
        self.installed.as_ref().map(|i| i.config.method)
    }

    pub fn count_trainable(&self) -> ParamCount {
        count_trainable(&self.registry)
    }

    /// Attaches the tuning method's modules and sets trainable flags.
    pub fn install(&mut self, mc: MethodConfig) -> Result<()> {
        if self.installed.is_some() {
            return Err(Error::State("a tuning method is already installed".into()));
        }
        let c = self.config.clone();
        let d = c.d_hidden;
        let reg = &mut self.registry;
        let mut freeze = FreezeSpec::new(mc.method);
        let mut lang = vec![BlockInjections::default(); c.n_lang_layers];
        let mut hist = vec![BlockInjections::default(); c.n_hist_layers];
        let mut cross = vec![CrossInjections::default(); c.n_cross_layers];
        let mut hib = Vec::new();
        let mut cib = Vec::new();
        let mut lang_prompts = PromptParams { prompts: None, n_prompts: 0 };
        let mut hist_prompts = PromptParams { prompts: None, n_prompts: 0 };

        let lora_rank = match mc.method {
            Method::Lora => Some(mc.d_mid),
            Method::VlnPetl if mc.components.lora => Some(mc.lora_rank),
            _ => None,
        };
        let all_adapters = mc.method == Method::Adapter;
        let lea = all_adapters || (mc.method == Method::VlnPetl && mc.components.lea);

        // Adapters beside each language sublayer; the host norms train with them.
        if lea {
            for (i, (block, inj)) in self.lang.blocks.iter().zip(&mut lang).enumerate() {
                inj.attn_adapter = Some(AdapterParams::new(reg, &format!("lang.layer{i}.adapter_attn"), d, mc.d_mid)?);
                inj.ffn_adapter = Some(AdapterParams::new(reg, &format!("lang.layer{i}.adapter_ffn"), d, mc.d_mid)?);
                freeze.extra_trainable.extend(block.attn_norm.ids());
                freeze.extra_trainable.extend(block.ffn_norm.ids());
            }
        }
        if all_adapters {
            for (i, (block, inj)) in self.hist.blocks.iter().zip(&mut hist).enumerate() {
                inj.attn_adapter = Some(AdapterParams::new(reg, &format!("hist.layer{i}.adapter_attn"), d, mc.d_mid)?);
                inj.ffn_adapter = Some(AdapterParams::new(reg, &format!("hist.layer{i}.adapter_ffn"), d, mc.d_mid)?);
                freeze.extra_trainable.extend(block.attn_norm.ids());
                freeze.extra_trainable.extend(block.ffn_norm.ids());
            }
            for (i, (block, inj)) in self.cross.iter().zip(&mut cross).enumerate() {
                for (name, stream, sinj) in [("text", &block.text, &mut inj.text), ("vis", &block.vis, &mut inj.vis)] {
                    let p = format!("cross.layer{i}.{name}");
                    *sinj = StreamInjections {
                        cross_adapter: Some(AdapterParams::new(reg, &format!("{p}.adapter_cross"), d, mc.d_mid)?),
                        self_adapter: Some(AdapterParams::new(reg, &format!("{p}.adapter_self"), d, mc.d_mid)?),
                        ffn_adapter: Some(AdapterParams::new(reg, &format!("{p}.adapter_ffn"), d, mc.d_mid)?),
                        self_lora: None,
                    };
                    freeze.extra_trainable.extend(stream.cross_norm.ids());
                    freeze.extra_trainable.extend(stream.self_norm.ids());
                    freeze.extra_trainable.extend(stream.ffn_norm.ids());
                }
            }
        }
        if mc.method == Method::VlnPetl {
            if mc.components.hib {
                for i in 0..c.n_hist_layers {
                    hib.push(HibParams::new(reg, &format!("hist.layer{i}.hib"), d, mc.d_mid, mc.booster_heads, mc.gate_t)?);
                }
            }
            if mc.components.cib {
                for i in 0..c.n_cross_layers {
                    cib.push(CibParams::new(reg, &format!("cross.layer{i}.cib"), d, mc.d_mid, mc.booster_heads, mc.gate_t)?);
                }
            }
            if !mc.gate_learnable {
                for h in &hib {
                    freeze.fixed_petl.insert(h.branch.gate.theta);
                }
                for cb in &cib {
                    freeze.fixed_petl.insert(cb.text.gate.theta);
                    freeze.fixed_petl.insert(cb.vis.gate.theta);
                }
            }
        }
        if let Some(r) = lora_rank {
            let g = mc.lora_gamma;
            for (i, inj) in lang.iter_mut().enumerate() {
                inj.lora = Some(LoraPair::new(reg, &format!("lang.layer{i}.attn"), d, r, g)?);
            }
            for (i, inj) in hist.iter_mut().enumerate() {
                inj.lora = Some(LoraPair::new(reg, &format!("hist.layer{i}.attn"), d, r, g)?);
            }
            for (i, inj) in cross.iter_mut().enumerate() {
                inj.cross_lora = Some(LoraPair::new(reg, &format!("cross.layer{i}.cross_attn"), d, r, g)?);
                inj.text.self_lora = Some(LoraPair::new(reg, &format!("cross.layer{i}.text.self_attn"), d, r, g)?);
                inj.vis.self_lora = Some(LoraPair::new(reg, &format!("cross.layer{i}.vis.self_attn"), d, r, g)?);
            }
        }
        if mc.method == Method::Prompt {
            lang_prompts = PromptParams::new(reg, "lang.prompts", mc.n_prompts, d)?;
            hist_prompts = PromptParams::new(reg, "hist.prompts", mc.n_prompts, d)?;
        }
        freeze.apply(reg);
        self.installed = Some(Installed {
            config: mc,
            freeze,
            lang,
            hist,
            cross,
            hib,
            cib,
            lang_prompts,
            hist_prompts,
        });
        Ok(())
    }

    fn empty_block() -> &'static BlockInjections {
        static EMPTY: std::sync::OnceLock<BlockInjections> = std::sync::OnceLock::new();
        EMPTY.get_or_init(BlockInjections::default)
    }

    fn empty_cross() -> &'static CrossInjections {
        static EMPTY: std::sync::OnceLock<CrossInjections> = std::sync::OnceLock::new();
        EMPTY.get_or_init(CrossInjections::default)
    }

    /// Instruction tokens to `f_x`, `(n_prompts + L) × d`.
    pub fn encode_language(&self, ctx: &mut Ctx<'_>, tokens: &[usize]) -> Result<Var> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty instruction".into()));
        }
        if tokens.len() > c.max_instr_len {
            return Err(Error::Input(format!(
                "instruction of {} tokens exceeds max_instr_len {}",
                tokens.len(),
                c.max_instr_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let word = ctx.param(self.lang.word_emb)?;
        let word = ctx.tape.gather_rows(word, tokens)?;
        let pos = ctx.param(self.lang.pos_emb)?;
        let pos = ctx.tape.slice_rows(pos, 0, tokens.len())?;
        let typ = ctx.param(self.lang.type_emb)?;
        let typ = ctx.tape.gather_rows(typ, &[0])?;
        let x = ctx.tape.add(word, pos)?;
        let x = ctx.tape.add_row(x, typ)?;
        let mut x = self.lang.norm.forward(ctx, x)?;
        if let Some(inst) = &self.installed {
            x = prompt_prepend(ctx, x, &inst.lang_prompts)?;
        }
        for (i, block) in self.lang.blocks.iter().enumerate() {
            let inj = self.installed.as_ref().map_or(Self::empty_block(), |s| &s.lang[i]);
            x = encoder_block(ctx, x, block, inj)?;
        }
        Ok(x)
    }

    /// Current panorama to observation tokens, `n_views × d`.
    pub fn encode_observation(&self, ctx: &mut Ctx<'_>, view_feats: &Tensor, angle_feats: &Tensor) -> Result<Var> {
        if view_feats.rows() != angle_feats.rows() {
            return Err(Error::shape("encode_observation", view_feats.shape(), angle_feats.shape()));
        }
        self.obs.forward(ctx, view_feats, angle_feats)
    }

    /// Fresh state whose history holds only the learned start token.
    pub fn start_episode(&self, ctx: &mut Ctx<'_>, node: usize) -> Result<EpisodeState> {
        let h0 = ctx.param(self.hist.start)?;
        Ok(EpisodeState {
            t: 0,
            node,
            done: false,
            history: vec![h0],
        })
    }

    /// `⟨h_0, …⟩` stacked into one `(t + 1) × d` tensor.
    pub fn history_tokens(&self, ctx: &mut Ctx<'_>, state: &EpisodeState) -> Result<Var> {
        if state.history.len() == 1 {
            Ok(state.history[0])
        } else {
            ctx.tape.concat_rows(&state.history)
        }
    }

    /// Encodes the panorama just left and the turn taken into `h_{t+1}` and appends it.
    pub fn encode_history_step(
        &self,
        ctx: &mut Ctx<'_>,
        prev_pano: &Tensor,
        prev_turn_angle: &Tensor,
        state: &mut EpisodeState,
    ) -> Result<()> {
        if state.done {
            return Err(Error::State("episode already stopped".into()));
        }
        let c = &self.config;
        if prev_pano.rows() != c.n_views {
            return Err(Error::shape("encode_history_step", prev_pano.shape(), &[c.n_views, c.d_img]));
        }
        let angle = Tensor::matrix(1, prev_turn_angle.numel(), prev_turn_angle.data().to_vec())?;
        let mut x = self.hist.embed.forward(ctx, prev_pano, &angle)?;
        let mut n_prompts = 0;
        if let Some(inst) = &self.installed {
            x = prompt_prepend(ctx, x, &inst.hist_prompts)?;
            n_prompts = inst.prompt_counts().1;
        }
        let h_prev = self.history_tokens(ctx, state)?;
        for (i, block) in self.hist.blocks.iter().enumerate() {
            let inst = self.installed.as_ref();
            let inj = inst.map_or(Self::empty_block(), |s| &s.hist[i]);
            x = match inst.and_then(|s| s.hib.get(i)) {
                Some(hib) => hib_forward(ctx, x, h_prev, block, inj, hib)?,
                None => encoder_block(ctx, x, block, inj)?,
            };
        }
        if n_prompts > 0 {
            x = ctx.tape.slice_rows(x, n_prompts, c.n_views)?;
        }
        let pooled = ctx.tape.mean_rows(x);
        let step = ctx.param(self.hist.step_emb)?;
        let step = ctx.tape.gather_rows(step, &[state.t.min(c.max_history - 1)])?;
        let h = ctx.tape.add(pooled, step)?;
        state.history.push(h);
        state.t += 1;
        Ok(())
    }

    /// Runs the cross-modal encoder over text and `[history; observation]`.
    pub fn cross_encode(&self, ctx: &mut Ctx<'_>, f_x: Var, o_t: Var, state: &EpisodeState) -> Result<(Var, Var)> {
        let hist = self.history_tokens(ctx, state)?;
        let mut v = ctx.tape.concat_rows(&[hist, o_t])?;
        let mut x = f_x;
        for (i, block) in self.cross.iter().enumerate() {
            let inst = self.installed.as_ref();
            let inj = inst.map_or(Self::empty_cross(), |s| &s.cross[i]);
            (x, v) = match inst.and_then(|s| s.cib.get(i)) {
                Some(cib) => cib_forward(ctx, x, v, block, inj, cib)?,
                None => cross_modal_block(ctx, x, v, block, inj)?,
            };
        }
        Ok((x, v))
    }

    /// Logits over the candidate views (in view order) followed by STOP.
    ///
    /// `vis_out` is the visual stream from [`Model::cross_encode`]; its last
    /// `n_views` rows are the observation tokens.
    pub fn predict_action_logits(&self, ctx: &mut Ctx<'_>, vis_out: Var, candidate_mask: &[bool]) -> Result<Var> {
        let n_views = self.config.n_views;
        if candidate_mask.len() != n_views {
            return Err(Error::shape("candidate mask", &[candidate_mask.len()], &[n_views]));
        }
        let rows = ctx.value(vis_out).rows();
        if rows < n_views + 1 {
            return Err(Error::shape("predict_action_logits", ctx.value(vis_out).shape(), &[n_views + 1]));
        }
        let offset = rows - n_views;
        let idx: Vec<usize> = (0..n_views).filter(|&v| candidate_mask[v]).map(|v| offset + v).collect();
        let stop_in = ctx.tape.slice_rows(vis_out, 0, 1)?;
        let stop_emb = ctx.param(self.head.stop)?;
        let stop_in = ctx.tape.add_row(stop_in, stop_emb)?;
        let stop = self.head.score.forward(ctx, stop_in)?;
        if idx.is_empty() {
            return Ok(stop);
        }
        let cand = ctx.tape.gather_rows(vis_out, &idx)?;
        let cand = self.head.score.forward(ctx, cand)?;
        ctx.tape.concat_rows(&[cand, stop])
    }

    /// Number of base attention modules (each hosts one LoRA pair).
    pub fn attention_module_count(&self) -> usize {
        self.config.n_lang_layers + self.config.n_hist_layers + 3 * self.config.n_cross_layers
    }
}
