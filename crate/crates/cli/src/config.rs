//! `key = value` run configuration.
//!
//! Every key has a default. A config file may set any subset; flags given on
//! the command line are applied afterwards and win. The resolved set is what
//! gets echoed into a run directory, and reading that echo back reproduces
//! the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use navpetl::model::Components;
use navpetl::trainer::ablation::AblationSetup;
use navpetl::trainer::TrainConfig;
use navpetl::world::Split;
use navpetl::{Method, MethodConfig, ModelConfig};

/// `(key, default, meaning)`, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("name", "", "run name; defaults to the method name"),
    ("out", "run", "directory holding run directories"),
    ("seed", "1", "seed for the world, base weights and shuffling"),
    ("method", "vln-petl", "finetune, bitfit, prompt, lora, adapter or vln-petl"),
    ("dataset", "", "episode file; empty generates episodes from the world settings"),
    ("grid", "6x6", "world grid as WxH"),
    ("edge_drop", "0.1", "probability of removing each grid edge"),
    ("episodes", "200", "training episodes"),
    ("eval_episodes", "50", "held-out episodes"),
    ("model", "desk", "base size preset: desk, grad-check or hamt-proxy"),
    ("d_hidden", "", "override the preset's hidden width"),
    ("n_heads", "", "override the preset's head count"),
    ("n_lang_layers", "", "override the preset's language layers"),
    ("n_hist_layers", "", "override the preset's history layers"),
    ("n_cross_layers", "", "override the preset's cross-modal layers"),
    ("d_mid", "", "adapter and booster bottleneck; defaults follow the preset"),
    ("lora_rank", "", "LoRA rank inside vln-petl; defaults follow the preset"),
    ("lora_gamma", "1", "LoRA scale"),
    ("n_prompts", "20", "prompt tokens per prompted encoder"),
    ("gate_t", "0.1", "booster gate temperature"),
    ("booster_heads", "4", "attention heads inside boosters"),
    ("gate_learnable", "true", "false holds booster gates at 0.5"),
    ("components", "lea,hib,cib,lora", "vln-petl components to install"),
    ("lr", "1e-4", "AdamW learning rate"),
    ("batch_size", "8", "episodes per update"),
    ("epochs", "30", "training epochs"),
    ("max_steps", "10", "rollout step cap"),
    ("weight_decay", "0.01", "decoupled weight decay on weight matrices"),
    ("teacher_forcing", "true", "follow the oracle path while training"),
];

type MethodPreset = fn(Method) -> MethodConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

pub fn parse_grid(v: &str) -> Result<(usize, usize)> {
    let (w, h) = v.split_once(['x', 'X']).ok_or_else(|| anyhow!("grid must look like 6x6, got {v:?}"))?;
    Ok((parse_num("grid", w.trim())?, parse_num("grid", h.trim())?))
}

impl RunConfig {
    /// Text of a config file: `key = value` lines, `#` comments, blank lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self.values.iter_mut().find(|(k, _)| *k == key).ok_or_else(|| {
            let known: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
            anyhow!("unknown config key {key:?}; known keys: {}", known.join(", "))
        })?;
        slot.1 = value.to_string();
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {pair:?}"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            "" => Ok(None),
            v => parse_num(key, v).map(Some),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse_num(key, self.get(key))
    }

    pub fn method(&self) -> Result<Method> {
        Ok(self.get("method").parse()?)
    }

    pub fn run_name(&self) -> Result<String> {
        Ok(match self.get("name") {
            "" => self.method()?.name().to_string(),
            n => n.to_string(),
        })
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(Path::new(self.get("out")).join(self.run_name()?))
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        parse_grid(self.get("grid"))
    }

    pub fn edge_drop(&self) -> Result<f64> {
        self.num("edge_drop")
    }

    pub fn episodes(&self, split: Split) -> Result<usize> {
        match split {
            Split::Seen => self.num("episodes"),
            Split::Unseen => self.num("eval_episodes"),
        }
    }

    pub fn dataset(&self) -> Option<PathBuf> {
        match self.get("dataset") {
            "" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    fn preset(&self) -> Result<(ModelConfig, MethodPreset)> {
        Ok(match self.get("model") {
            "desk" => (ModelConfig::desk(), MethodConfig::desk),
            "grad-check" => (ModelConfig::grad_check(), MethodConfig::grad_check),
            "hamt-proxy" => (ModelConfig::hamt_proxy(), MethodConfig::new),
            other => bail!("model: unknown preset {other:?}; valid presets: desk, grad-check, hamt-proxy"),
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let (mut c, _) = self.preset()?;
        if let Some(v) = self.opt("d_hidden")? {
            c.d_hidden = v;
        }
        if let Some(v) = self.opt("n_heads")? {
            c.n_heads = v;
        }
        if let Some(v) = self.opt("n_lang_layers")? {
            c.n_lang_layers = v;
        }
        if let Some(v) = self.opt("n_hist_layers")? {
            c.n_hist_layers = v;
        }
        if let Some(v) = self.opt("n_cross_layers")? {
            c.n_cross_layers = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn method_config_for(&self, method: Method) -> Result<MethodConfig> {
        let (_, preset) = self.preset()?;
        let mut mc = preset(method);
        if let Some(v) = self.opt("d_mid")? {
            mc.d_mid = v;
        }
        if let Some(v) = self.opt("lora_rank")? {
            mc.lora_rank = v;
        }
        mc.lora_gamma = self.num("lora_gamma")?;
        mc.n_prompts = self.num("n_prompts")?;
        mc.gate_t = self.num("gate_t")?;
        mc.booster_heads = self.num("booster_heads")?;
        mc.gate_learnable = parse_bool("gate_learnable", self.get("gate_learnable"))?;
        mc.components = self.components()?;
        Ok(mc)
    }

    pub fn method_config(&self) -> Result<MethodConfig> {
        self.method_config_for(self.method()?)
    }

    fn components(&self) -> Result<Components> {
        let mut c = Components::NONE;
        for part in self.get("components").split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "lea" => c.lea = true,
                "hib" => c.hib = true,
                "cib" => c.cib = true,
                "lora" => c.lora = true,
                "none" => {}
                other => bail!("components: unknown component {other:?}; valid: lea, hib, cib, lora"),
            }
        }
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            lr: self.num("lr")?,
            batch_size: self.num("batch_size")?,
            epochs: self.num("epochs")?,
            seed: self.seed()?,
            max_steps: self.num("max_steps")?,
            teacher_forcing: parse_bool("teacher_forcing", self.get("teacher_forcing"))?,
            weight_decay: self.num("weight_decay")?,
            max_updates: None,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn ablation_setup(&self) -> Result<AblationSetup> {
        Ok(AblationSetup {
            model: self.model_config()?,
            method: self.method_config_for(Method::VlnPetl)?,
            train: self.train_config()?,
            grid: self.grid()?,
            edge_drop: self.edge_drop()?,
            world_seed: self.seed()?,
            n_train: self.episodes(Split::Seen)?,
            n_eval: self.episodes(Split::Unseen)?,
            model_seed: self.seed()?,
        })
    }

    /// Resolves every typed view once so bad values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.grid()?;
        self.edge_drop()?;
        self.episodes(Split::Seen)?;
        self.episodes(Split::Unseen)?;
        self.model_config()?;
        self.method_config()?;
        self.train_config()?;
        Ok(())
    }
}
