use crate::error::{Error, Result};
use crate::petl::Method;

/// Architecture of the frozen base model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_hidden: usize,
    /// Width of raw per-view image features.
    pub d_img: usize,
    /// Width of angle features.
    pub d_ang: usize,
    pub n_views: usize,
    pub vocab_size: usize,
    pub max_instr_len: usize,
    /// Number of learned history-step embeddings; later steps reuse the last one.
    pub max_history: usize,
    pub n_lang_layers: usize,
    pub n_hist_layers: usize,
    pub n_cross_layers: usize,
    pub n_heads: usize,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub fn desk() -> Self {
        ModelConfig {
            d_hidden: 64,
            d_img: 32,
            d_ang: 8,
            n_views: 8,
            vocab_size: 32,
            max_instr_len: 32,
            max_history: 16,
            n_lang_layers: 2,
            n_hist_layers: 1,
            n_cross_layers: 2,
            n_heads: 4,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn grad_check() -> Self {
        ModelConfig {
            d_hidden: 16,
            d_img: 8,
            n_lang_layers: 2,
            n_hist_layers: 1,
            n_cross_layers: 1,
            n_heads: 2,
            ..Self::desk()
        }
    }

    /// A stand-in for the size of the pre-trained history-aware transformer.
    /// Layer counts and feature widths are assumptions; it is only ever
    /// instantiated virtually for parameter accounting.
    pub fn hamt_proxy() -> Self {
        ModelConfig {
            d_hidden: 768,
            d_img: 768,
            d_ang: 8,
            n_views: 36,
            vocab_size: 30522,
            max_instr_len: 512,
            max_history: 50,
            n_lang_layers: 9,
            n_hist_layers: 2,
            n_cross_layers: 4,
            n_heads: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_hidden", self.d_hidden),
            ("d_img", self.d_img),
            ("d_ang", self.d_ang),
            ("n_views", self.n_views),
            ("vocab_size", self.vocab_size),
            ("max_instr_len", self.max_instr_len),
            ("max_history", self.max_history),
            ("n_lang_layers", self.n_lang_layers),
            ("n_hist_layers", self.n_hist_layers),
            ("n_cross_layers", self.n_cross_layers),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_hidden {}",
                self.n_heads, self.d_hidden
            )));
        }
        Ok(())
    }
}

/// Which VLN-PETL components are installed; used for the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub lea: bool,
    pub hib: bool,
    pub cib: bool,
    pub lora: bool,
}

impl Components {
    pub const ALL: Components = Components {
        lea: true,
        hib: true,
        cib: true,
        lora: true,
    };
    pub const NONE: Components = Components {
        lea: false,
        hib: false,
        cib: false,
        lora: false,
    };
}

impl Default for Components {
    fn default() -> Self {
        Components::ALL
    }
}

/// Tuning method plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    /// Bottleneck width of adapters and boosters; also the rank of the
    /// stand-alone LoRA baseline.
    pub d_mid: usize,
    /// Rank of the LoRA component inside VLN-PETL.
    pub lora_rank: usize,
    pub lora_gamma: f64,
    pub n_prompts: usize,
    pub gate_t: f64,
    pub booster_heads: usize,
    pub components: Components,
    /// When false the booster gates stay at `theta = 0`, i.e. a fixed 0.5 mix.
    pub gate_learnable: bool,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            d_mid: 64,
            lora_rank: 16,
            lora_gamma: 1.0,
            n_prompts: 20,
            gate_t: 0.1,
            booster_heads: 4,
            components: Components::ALL,
            gate_learnable: true,
        }
    }

    /// Bottleneck sizes for the desk-scale model.
    pub fn desk(method: Method) -> Self {
        MethodConfig {
            d_mid: 32,
            lora_rank: 4,
            ..Self::new(method)
        }
    }

    pub fn grad_check(method: Method) -> Self {
        MethodConfig {
            d_mid: 8,
            lora_rank: 2,
            booster_heads: 2,
            ..Self::new(method)
        }
    }
}
