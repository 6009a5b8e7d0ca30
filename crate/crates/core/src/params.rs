//! Named parameter store, the binding context that puts parameters on a tape,
//! and the two primitive layers (affine map and layer norm) everything is built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormBias,
    Head,
    Petl,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::NormScale => 2,
            Role::NormBias => 3,
            Role::Head => 4,
            Role::Petl => 5,
        }
    }

    pub fn from_byte(b: u8) -> Option<Role> {
        Some(match b {
            0 => Role::Weight,
            1 => Role::Bias,
            2 => Role::NormScale,
            3 => Role::NormBias,
            4 => Role::Head,
            5 => Role::Petl,
            _ => return None,
        })
    }

    /// Bias-like roles, the set BitFit tunes.
    pub fn is_bias(self) -> bool {
        matches!(self, Role::Bias | Role::NormBias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `(-a, a)`.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub trainable: bool,
    value: Option<Tensor>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_ref()
    }
}

/// Ordered map from parameter name to value, role and trainable flag.
///
/// A *virtual* registry records names and shapes only; it backs parameter
/// accounting at sizes too large to allocate.
#[derive(Clone, Debug)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
    materialized: bool,
}

impl ParamRegistry {
    pub fn new(seed: u64) -> Self {
        ParamRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            materialized: true,
        }
    }

    pub fn new_virtual() -> Self {
        ParamRegistry {
            materialized: false,
            ..Self::new(0)
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    /// Registers a parameter; new parameters start frozen.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], role: Role, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let value = if self.materialized {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => (0..n).map(|_| self.rng.gen_range(-a..a)).collect(),
            };
            Some(Tensor::new(shape, data)?)
        } else {
            None
        };
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            role,
            trainable: false,
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor> {
        self.entries[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::State("virtual registry holds no values".into()))
    }

    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        self.entries[id.0]
            .value
            .as_mut()
            .ok_or_else(|| Error::State("virtual registry holds no values".into()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).and_then(|id| self.entries[id.0].value.as_ref())
    }

    pub fn set_value(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.shape != tensor.shape() {
            return Err(Error::shape("set_value", &e.shape, tensor.shape()));
        }
        e.value = Some(tensor);
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(ParamEntry::numel).sum()
    }

    /// 64-bit FNV-1a over the names and bit patterns of every frozen parameter.
    pub fn frozen_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for e in self.entries.iter().filter(|e| !e.trainable) {
            h.write(e.name.as_bytes());
            if let Some(v) = &e.value {
                for x in v.data() {
                    h.write(&x.to_bits().to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Inference: nothing is tracked.
    Off,
    /// Gradients for trainable parameters only.
    Trainable,
    /// Gradients for every parameter (verification).
    All,
}

/// Per-parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// Zero gradients for exactly the trainable set of `registry`.
    pub fn zeros_for(registry: &ParamRegistry) -> Self {
        let grads = registry
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| vec![0.0; e.numel()]))
            .collect();
        Gradients { grads }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                for (a, b) in d.iter_mut().zip(src) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
pub struct Ctx<'r> {
    pub tape: Tape,
    registry: &'r ParamRegistry,
    bound: Vec<Option<Var>>,
    mode: GradMode,
}

impl<'r> Ctx<'r> {
    pub fn new(registry: &'r ParamRegistry, mode: GradMode) -> Self {
        Ctx {
            tape: Tape::new(),
            registry,
            bound: vec![None; registry.len()],
            mode,
        }
    }

    pub fn registry(&self) -> &'r ParamRegistry {
        self.registry
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let track = match self.mode {
            GradMode::Off => false,
            GradMode::Trainable => self.registry.entry(id).trainable,
            GradMode::All => true,
        };
        let mut t = self.registry.value(id)?.clone();
        t.requires_grad = track;
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs backward from `loss` and collects gradients of every tracked parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut grads = vec![None; self.registry.len()];
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if self.tape.value(*v).requires_grad {
                    grads[i] = Some(
                        self.tape
                            .grad(*v)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; self.tape.value(*v).numel()]),
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `x W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        role: Role,
        init: Init,
    ) -> Result<Self> {
        let weight = reg.add(format!("{prefix}.weight"), &[d_in, d_out], role, init)?;
        let bias_role = if role == Role::Weight { Role::Bias } else { role };
        let bias = if bias {
            Some(reg.add(format!("{prefix}.bias"), &[d_out], bias_role, Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Fan-in scaled uniform initialisation.
    pub fn fan_in_init(d_in: usize) -> Init {
        Init::Uniform(1.0 / (d_in as f64).sqrt())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b)?;
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d: usize, scale_role: Role, bias_role: Role) -> Result<Self> {
        Ok(Norm {
            gamma: reg.add(format!("{prefix}.gamma"), &[d], scale_role, Init::Ones)?,
            beta: reg.add(format!("{prefix}.beta"), &[d], bias_role, Init::Zeros)?,
        })
    }

    pub fn base(reg: &mut ParamRegistry, prefix: &str, d: usize) -> Result<Self> {
        Self::new(reg, prefix, d, Role::NormScale, Role::NormBias)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma)?;
        let b = ctx.param(self.beta)?;
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}
