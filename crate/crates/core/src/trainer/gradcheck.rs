//! Whole-model gradient audit: the analytic gradient of the imitation loss
//! against central differences on sampled coordinates of every parameter.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{il_loss, il_step, Env, TrainConfig};
use crate::error::Result;
use crate::model::{MethodConfig, Model, ModelConfig};
use crate::numerics::{finite_diff_at, relative_error, Tensor};
use crate::params::{ParamRegistry, Role};
use crate::petl::Method;
use crate::world::{generate_episode, generate_world};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub method: Method,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= tol)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// `group TAB tensors TAB coords TAB max_rel_err TAB PASS|FAIL` lines.
    pub fn to_tsv(&self, tol: f64) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let verdict = if g.max_rel_err <= tol { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{}\t{}\t{}\t{:.3e}\t{verdict}", g.group, g.tensors, g.coords, g.max_rel_err);
        }
        out
    }
}

/// Component a parameter belongs to, for reporting.
pub fn component_of(name: &str, role: Role) -> String {
    if name.contains(".lora_") {
        "LoRA".into()
    } else if name.contains(".hib") {
        "HIB".into()
    } else if name.contains(".cib") {
        "CIB".into()
    } else if name.starts_with("lang.") && name.contains(".adapter_") {
        "LEA".into()
    } else if name.contains(".adapter_") {
        "adapter".into()
    } else if name.contains("prompts") {
        "prompt".into()
    } else if role == Role::Head {
        "head".into()
    } else {
        let encoder = name.split('.').next().unwrap_or(name);
        format!("{encoder}.{}", format!("{role:?}").to_lowercase())
    }
}

/// Moves every added parameter off its initial value so that zero-initialised
/// projections and neutral gates carry gradient through their whole branch.
pub fn perturb_petl(registry: &mut ParamRegistry, seed: u64, scale: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = registry.iter().filter(|(_, e)| e.role == Role::Petl).map(|(id, _)| id).collect();
    for id in ids {
        for x in registry.value_mut(id)?.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
    Ok(())
}

/// Checks up to `per_tensor` coordinates of every trainable parameter of a small model
/// with `method` installed, on one episode of a 3x3 world.
pub fn check_model_gradients(method: Method, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut model = Model::new(ModelConfig::grad_check(), seed)?;
    model.install(MethodConfig::grad_check(method))?;
    perturb_petl(model.registry_mut(), seed ^ 0x5eed, 0.3)?;
    let world = generate_world(seed, 3, 3, 0.0)?;
    let episode = generate_episode(&world, seed)?;
    let env = Env::for_model(&world, &model)?;
    let tc = TrainConfig::default();

    let (_, grads) = il_step(&model, &env, &episode, &tc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    let ids: Vec<_> = model.registry().iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let entry = model.registry().entry(id);
        let group = component_of(&entry.name, entry.role);
        let n = entry.numel();
        let coords = sample(&mut rng, n, per_tensor.min(n)).into_vec();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let base = model.registry().value(id)?.clone();
        let mut f = |t: &Tensor| {
            model.registry_mut().set_value(id, t.clone())?;
            il_loss(&model, &env, &episode, &tc)
        };
        let numeric = finite_diff_at(&mut f, &base, FD_STEP, &coords);
        model.registry_mut().set_value(id, base)?;
        let numeric = numeric?;
        let err = coords
            .iter()
            .zip(&numeric)
            .map(|(&c, &num)| relative_error(analytic[c], num))
            .fold(0.0, f64::max);
        let g = groups.entry(group.clone()).or_insert(GroupCheck {
            group,
            tensors: 0,
            coords: 0,
            max_rel_err: 0.0,
        });
        g.tensors += 1;
        g.coords += coords.len();
        g.max_rel_err = g.max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        method,
        groups: groups.into_values().collect(),
    })
}
