//! Imitation learning with teacher forcing, greedy evaluation rollouts, the
//! finite-difference audit of a whole model and the ablation harnesses.

pub mod ablation;
mod adamw;
pub mod gradcheck;

pub use adamw::AdamW;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::TrajectoryRecord;
use crate::model::{EpisodeState, Model};
use crate::numerics::{Tensor, Var};
use crate::params::{Ctx, GradMode, Gradients};
use crate::world::{
    angle_features, oracle_action, render_observation, shortest_path, step, Episode, NavState, Observation, ViewSpec,
    WorldGraph,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub teacher_forcing: bool,
    pub weight_decay: f64,
    /// Stop after this many optimizer updates, if set.
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 1,
            max_steps: 10,
            teacher_forcing: true,
            weight_decay: 0.01,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the agent needs besides the model.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub world: &'a WorldGraph,
    pub views: ViewSpec,
}

impl<'a> Env<'a> {
    pub fn for_model(world: &'a WorldGraph, model: &Model) -> Result<Self> {
        let c = model.config();
        Ok(Env {
            world,
            views: ViewSpec::new(c.n_views, c.d_img, c.d_ang)?,
        })
    }
}

/// Per-step action logits and targets of one teacher-forced rollout.
pub struct Rollout {
    pub loss: Var,
    pub logits: Vec<Var>,
    pub targets: Vec<usize>,
}

fn turn_tensor(turn: f64, d_ang: usize) -> Result<Tensor> {
    Tensor::vector(angle_features(turn, 0.0, d_ang))
}

/// Next action on a shortest path from the agent's node to `goal`.
fn expert_action(env: &Env<'_>, nav: &NavState, obs: &Observation, goal: usize) -> Result<usize> {
    let cands = obs.candidates();
    if nav.node == goal {
        return Ok(cands.len());
    }
    let (path, _) = shortest_path(env.world, nav.node, goal)?;
    cands
        .iter()
        .position(|&(_, n)| n == path[1])
        .ok_or_else(|| Error::Contract(format!("shortest-path successor of {} is not a candidate", nav.node)))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rolls along the episode and accumulates the mean cross-entropy against the
/// expert action at every step, the final STOP included.
///
/// With teacher forcing the agent follows the oracle path; otherwise it follows
/// its own argmax and is supervised toward the goal from wherever it is.
pub fn il_rollout(ctx: &mut Ctx<'_>, model: &Model, env: &Env<'_>, ep: &Episode, tc: &TrainConfig) -> Result<Rollout> {
    let f_x = model.encode_language(ctx, &ep.instruction)?;
    let mut nav = NavState::new(ep.start);
    let mut state = model.start_episode(ctx, ep.start)?;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut losses = Vec::new();
    loop {
        let obs = render_observation(env.world, nav.node, nav.heading, &env.views)?;
        let l = step_logits(ctx, model, f_x, &obs, &state)?;
        let target = if tc.teacher_forcing {
            oracle_action(env.world, &env.views, &nav, &ep.path)?
        } else {
            expert_action(env, &nav, &obs, ep.goal)?
        };
        losses.push(ctx.tape.cross_entropy(l, target)?);
        logits.push(l);
        targets.push(target);
        let action = if tc.teacher_forcing {
            target
        } else {
            argmax(ctx.value(l).data())
        };
        let stop = obs.candidates().len();
        if action == stop || logits.len() > tc.max_steps {
            break;
        }
        if tc.teacher_forcing && logits.len() > ep.hops() + 1 {
            return Err(Error::State("teacher-forced rollout overran the oracle path".into()));
        }
        let next = step(env.world, &env.views, &nav, action)?;
        model.encode_history_step(ctx, &obs.view_feats, &turn_tensor(next.last_turn, env.views.d_ang)?, &mut state)?;
        state.node = next.node;
        nav = next;
    }
    let total = if losses.len() == 1 {
        losses[0]
    } else {
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = ctx.tape.add(acc, l)?;
        }
        acc
    };
    let loss = ctx.tape.scale(total, 1.0 / losses.len() as f64);
    Ok(Rollout { loss, logits, targets })
}

fn step_logits(ctx: &mut Ctx<'_>, model: &Model, f_x: Var, obs: &Observation, state: &EpisodeState) -> Result<Var> {
    let o = model.encode_observation(ctx, &obs.view_feats, &obs.angle_feats)?;
    let (_, vis) = model.cross_encode(ctx, f_x, o, state)?;
    model.predict_action_logits(ctx, vis, &obs.candidate_mask)
}

/// Imitation loss of one episode without gradients.
pub fn il_loss(model: &Model, env: &Env<'_>, ep: &Episode, tc: &TrainConfig) -> Result<f64> {
    let mut ctx = Ctx::new(model.registry(), GradMode::Off);
    let r = il_rollout(&mut ctx, model, env, ep, tc)?;
    Ok(ctx.value(r.loss).item())
}

/// Imitation loss of one episode and its gradient for every trainable parameter.
pub fn il_step(model: &Model, env: &Env<'_>, ep: &Episode, tc: &TrainConfig) -> Result<(f64, Gradients)> {
    il_step_mode(model, env, ep, tc, GradMode::Trainable)
}

pub fn il_step_mode(
    model: &Model,
    env: &Env<'_>,
    ep: &Episode,
    tc: &TrainConfig,
    mode: GradMode,
) -> Result<(f64, Gradients)> {
    let mut ctx = Ctx::new(model.registry(), mode);
    let r = il_rollout(&mut ctx, model, env, ep, tc)?;
    let loss = ctx.value(r.loss).item();
    let grads = ctx.backward(r.loss)?;
    Ok((loss, grads))
}

/// Mean loss and mean gradient over a batch, summed in batch order.
pub fn batch_gradients(
    model: &Model,
    env: &Env<'_>,
    batch: &[&Episode],
    tc: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_for(model.registry());
    let mut loss = 0.0;
    let w = 1.0 / batch.len() as f64;
    for ep in batch {
        let (l, g) = il_step(model, env, ep, tc)?;
        loss += l;
        grads.add_scaled(&g, w);
    }
    Ok((loss * w, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 0 is the loss of the untrained model; training epochs count from 1.
    pub epoch: usize,
    pub mean_loss: f64,
    pub trainable: usize,
    pub total: usize,
    pub frozen_hash: u64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{}\t{}\t{:016x}",
            self.epoch, self.mean_loss, self.trainable, self.total, self.frozen_hash
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub frozen_hash_before: u64,
    pub frozen_hash_after: u64,
    pub updates: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epochs[0].mean_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().expect("epoch 0 is always logged").mean_loss
    }

    /// `epoch TAB mean_loss TAB trainable TAB total TAB frozen_hash` lines.
    pub fn to_log(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn mean_loss(model: &Model, env: &Env<'_>, data: &[Episode], tc: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for ep in data {
        total += il_loss(model, env, ep, tc)?;
    }
    Ok(total / data.len() as f64)
}

pub fn train(model: &mut Model, env: &Env<'_>, data: &[Episode], tc: &TrainConfig) -> Result<TrainReport> {
    train_with(model, env, data, tc, |_| {})
}

/// Trains with a callback after every epoch (epoch 0 included).
pub fn train_with(
    model: &mut Model,
    env: &Env<'_>,
    data: &[Episode],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if model.installed().is_none() {
        return Err(Error::State("install a tuning method before training".into()));
    }
    let frozen_hash_before = model.registry().frozen_hash();
    let log = |model: &Model, epoch, mean_loss| {
        let c = model.count_trainable();
        EpochLog {
            epoch,
            mean_loss,
            trainable: c.trainable,
            total: c.total,
            frozen_hash: model.registry().frozen_hash(),
        }
    };
    let first = log(model, 0, mean_loss(model, env, data, tc)?);
    on_epoch(&first);
    let mut epochs = vec![first];
    let mut opt = AdamW::new(model.registry(), tc.lr, tc.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut updates = 0;
    'outer: for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_updates.is_some_and(|m| updates >= m) {
                break 'outer;
            }
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradients(model, env, &batch, tc)?;
            if !loss.is_finite() {
                return Err(Error::State(format!("loss diverged to {loss} in epoch {epoch}")));
            }
            opt.update(model.registry_mut(), &grads)?;
            updates += 1;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let entry = log(model, epoch, total / seen as f64);
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(TrainReport {
        epochs,
        frozen_hash_before,
        frozen_hash_after: model.registry().frozen_hash(),
        updates,
    })
}

/// Greedy rollout: argmax action each step, at most `max_steps` moves.
pub fn rollout_greedy(model: &Model, env: &Env<'_>, ep: &Episode, max_steps: usize) -> Result<TrajectoryRecord> {
    let mut ctx = Ctx::new(model.registry(), GradMode::Off);
    let f_x = model.encode_language(&mut ctx, &ep.instruction)?;
    let mut nav = NavState::new(ep.start);
    let mut state = model.start_episode(&mut ctx, ep.start)?;
    let mut moves = 0;
    while moves < max_steps {
        let obs = render_observation(env.world, nav.node, nav.heading, &env.views)?;
        let l = step_logits(&mut ctx, model, f_x, &obs, &state)?;
        let action = argmax(ctx.value(l).data());
        if action == obs.candidates().len() {
            break;
        }
        let next = step(env.world, &env.views, &nav, action)?;
        model.encode_history_step(&mut ctx, &obs.view_feats, &turn_tensor(next.last_turn, env.views.d_ang)?, &mut state)?;
        state.node = next.node;
        nav = next;
        moves += 1;
    }
    TrajectoryRecord::new(nav.path, ep.path.clone())
}

pub fn evaluate(model: &Model, env: &Env<'_>, episodes: &[Episode], tc: &TrainConfig) -> Result<Vec<TrajectoryRecord>> {
    episodes.iter().map(|ep| rollout_greedy(model, env, ep, tc.max_steps)).collect()
}

/// An agent that replays the oracle path; scores perfectly by construction.
pub fn evaluate_oracle(env: &Env<'_>, episodes: &[Episode], max_steps: usize) -> Result<Vec<TrajectoryRecord>> {
    episodes
        .iter()
        .map(|ep| {
            let mut nav = NavState::new(ep.start);
            let mut moves = 0;
            loop {
                let action = oracle_action(env.world, &env.views, &nav, &ep.path)?;
                let obs = render_observation(env.world, nav.node, nav.heading, &env.views)?;
                if action == obs.candidates().len() || moves >= max_steps {
                    break;
                }
                nav = step(env.world, &env.views, &nav, action)?;
                moves += 1;
            }
            TrajectoryRecord::new(nav.path, ep.path.clone())
        })
        .collect()
}
