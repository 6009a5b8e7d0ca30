//! Component and gate ablations: one training run per variant, scored on
//! held-out episodes of the same world.

use std::fmt::Write as _;

use super::{evaluate, train, Env, TrainConfig};
use crate::error::Result;
use crate::metrics::{aggregate, MetricReport};
use crate::model::{Components, MethodConfig, Model, ModelConfig};
use crate::petl::Method;
use crate::world::{generate_dataset, generate_world, Episode, Split, WorldGraph};

/// Component rows in the order they are conventionally reported.
pub const COMPONENT_ROWS: [Components; 9] = [
    Components::NONE,
    Components { lea: true, hib: false, cib: false, lora: false },
    Components { lea: false, hib: true, cib: false, lora: false },
    Components { lea: false, hib: false, cib: true, lora: false },
    Components { lea: true, hib: true, cib: false, lora: false },
    Components { lea: true, hib: false, cib: true, lora: false },
    Components { lea: false, hib: true, cib: true, lora: false },
    Components { lea: true, hib: true, cib: true, lora: false },
    Components::ALL,
];

pub const GATE_TEMPERATURES: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub grid: (usize, usize),
    pub edge_drop: f64,
    pub world_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub model_seed: u64,
}

impl Default for AblationSetup {
    fn default() -> Self {
        AblationSetup {
            model: ModelConfig::desk(),
            method: MethodConfig::desk(Method::VlnPetl),
            train: TrainConfig::default(),
            grid: (6, 6),
            edge_drop: 0.1,
            world_seed: 1,
            n_train: 200,
            n_eval: 50,
            model_seed: 1,
        }
    }
}

struct Data {
    world: WorldGraph,
    train: Vec<Episode>,
    eval: Vec<Episode>,
}

impl AblationSetup {
    fn data(&self) -> Result<Data> {
        let world = generate_world(self.world_seed, self.grid.0, self.grid.1, self.edge_drop)?;
        let train = generate_dataset(&world, Split::Seen, self.n_train)?;
        let eval = generate_dataset(&world, Split::Unseen, self.n_eval)?;
        Ok(Data { world, train, eval })
    }

    fn run(&self, data: &Data, mc: MethodConfig) -> Result<MetricReport> {
        let mut model = Model::new(self.model.clone(), self.model_seed)?;
        model.install(mc)?;
        let env = Env::for_model(&data.world, &model)?;
        train(&mut model, &env, &data.train, &self.train)?;
        let records = evaluate(&model, &env, &data.eval, &self.train)?;
        aggregate(&data.world, &records)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentRow {
    pub components: Components,
    pub trainable: usize,
    pub report: MetricReport,
}

/// One vln-petl run per row of [`COMPONENT_ROWS`].
pub fn component_ablation(setup: &AblationSetup) -> Result<Vec<ComponentRow>> {
    let data = setup.data()?;
    COMPONENT_ROWS
        .iter()
        .map(|&components| {
            let mc = MethodConfig {
                method: Method::VlnPetl,
                components,
                ..setup.method.clone()
            };
            let mut probe = Model::new_virtual(setup.model.clone())?;
            probe.install(mc.clone())?;
            Ok(ComponentRow {
                components,
                trainable: probe.count_trainable().trainable,
                report: setup.run(&data, mc)?,
            })
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

pub fn format_component_table(rows: &[ComponentRow]) -> String {
    let mut out = String::from("row\tLEA\tHIB\tCIB\tLoRA\ttrainable\tSR\tSPL\n");
    for (i, r) in rows.iter().enumerate() {
        let c = r.components;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            i + 1,
            mark(c.lea),
            mark(c.hib),
            mark(c.cib),
            mark(c.lora),
            r.trainable,
            r.report.sr,
            r.report.spl
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateAblation {
    /// `(T, report)` for each temperature, learnable gates.
    pub temperatures: Vec<(f64, MetricReport)>,
    /// At the setup's own temperature: gates held at 0.5, then learnable.
    pub fixed_half: MetricReport,
    pub learnable: MetricReport,
}

/// Full vln-petl runs sweeping the gate temperature, then a fixed 0.5 mix
/// against the learnable gate.
pub fn gate_ablation(setup: &AblationSetup, temperatures: &[f64]) -> Result<GateAblation> {
    let data = setup.data()?;
    let base = MethodConfig {
        method: Method::VlnPetl,
        components: Components::ALL,
        gate_learnable: true,
        ..setup.method.clone()
    };
    let mut rows = Vec::with_capacity(temperatures.len());
    let mut learnable = None;
    for &t in temperatures {
        let report = setup.run(&data, MethodConfig { gate_t: t, ..base.clone() })?;
        if t == base.gate_t {
            learnable = Some(report);
        }
        rows.push((t, report));
    }
    let learnable = match learnable {
        Some(r) => r,
        None => setup.run(&data, base.clone())?,
    };
    let fixed_half = setup.run(&data, MethodConfig { gate_learnable: false, ..base })?;
    Ok(GateAblation {
        temperatures: rows,
        fixed_half,
        learnable,
    })
}

pub fn format_gate_table(g: &GateAblation) -> String {
    let mut out = String::from("T");
    for (t, _) in &g.temperatures {
        let _ = write!(out, "\t{t}");
    }
    for metric in ["SR", "SPL"] {
        let _ = write!(out, "\n{metric}");
        for (_, r) in &g.temperatures {
            let _ = write!(out, "\t{:.2}", r.get(metric).expect("known metric"));
        }
    }
    out.push_str("\n\nalpha\t0.5\tlearnable\n");
    for metric in ["SR", "SPL"] {
        let _ = writeln!(
            out,
            "{metric}\t{:.2}\t{:.2}",
            g.fixed_half.get(metric).expect("known metric"),
            g.learnable.get(metric).expect("known metric")
        );
    }
    out
}
