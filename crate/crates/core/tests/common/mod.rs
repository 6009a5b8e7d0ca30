//! Loop-based reference implementations, written against plain nested vectors
//! and never touching the tape.

#![allow(dead_code)]

use navpetl::attention::{AttentionParams, BlockParams, FeedForward};
use navpetl::params::{Linear, Norm, ParamRegistry};
use navpetl::petl::{AdapterParams, GateParam, LoraParams};
use navpetl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    if t.shape().len() == 1 {
        return vec![t.data().to_vec()];
    }
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Overwrites every parameter with uniform noise in `±scale`.
pub fn randomize(reg: &mut ParamRegistry, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = reg.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in reg.value_mut(id).unwrap().data_mut() {
            *x = if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..scale) };
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * c).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn param(reg: &ParamRegistry, id: navpetl::ParamId) -> Mat {
    mat(reg.value(id).unwrap())
}

pub fn linear(reg: &ParamRegistry, l: &Linear, x: &Mat) -> Mat {
    let mut y = matmul(x, &param(reg, l.weight));
    if let Some(b) = l.bias {
        let b = &param(reg, b)[0];
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(reg: &ParamRegistry, n: &Norm, x: &Mat) -> Mat {
    let g = &param(reg, n.gamma)[0];
    let b = &param(reg, n.beta)[0];
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-12).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn lora_linear(reg: &ParamRegistry, base: &Linear, p: &LoraParams, x: &Mat) -> Mat {
    let dense = add(&param(reg, base.weight), &scale(&matmul(&param(reg, p.down), &param(reg, p.up)), p.gamma));
    let mut y = matmul(x, &dense);
    if let Some(b) = base.bias {
        y = add(&y, &vec![param(reg, b)[0].clone(); y.len()]);
    }
    y
}

/// Per-head, per-query loops over keys.
pub fn attention(
    reg: &ParamRegistry,
    p: &AttentionParams,
    q_src: &Mat,
    kv_src: &Mat,
    lora: Option<(&LoraParams, &LoraParams)>,
) -> (Mat, Vec<Mat>) {
    let (q, v) = match lora {
        Some((lq, lv)) => (lora_linear(reg, &p.q, lq, q_src), lora_linear(reg, &p.v, lv, kv_src)),
        None => (linear(reg, &p.q, q_src), linear(reg, &p.v, kv_src)),
    };
    let k = linear(reg, &p.k, kv_src);
    let dh = p.d / p.n_heads;
    let mut merged = vec![vec![0.0; p.d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..p.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w_h = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                merged[i][c] = w.iter().zip(&v).map(|(a, vj)| a * vj[c]).sum();
            }
            w_h.push(w);
        }
        weights.push(w_h);
    }
    (linear(reg, &p.o, &merged), weights)
}

pub fn ffn(reg: &ParamRegistry, p: &FeedForward, x: &Mat) -> Mat {
    let h = map(&linear(reg, &p.up, x), gelu);
    linear(reg, &p.down, &h)
}

pub fn adapter(reg: &ParamRegistry, p: &AdapterParams, x: &Mat) -> Mat {
    let h = map(&linear(reg, &p.down, x), relu);
    linear(reg, &p.up, &h)
}

pub fn gate_alpha(reg: &ParamRegistry, g: &GateParam) -> f64 {
    sigmoid(param(reg, g.theta)[0][0] / g.temperature)
}

/// Post-norm block with optional parallel adapters.
pub fn block(reg: &ParamRegistry, p: &BlockParams, x: &Mat, adapters: Option<(&AdapterParams, &AdapterParams)>) -> Mat {
    let (a, _) = attention(reg, &p.attn, x, x, None);
    let mut r = add(x, &a);
    if let Some((aa, _)) = adapters {
        r = add(&r, &adapter(reg, aa, x));
    }
    let h = layer_norm(reg, &p.attn_norm, &r);
    let mut r = add(&h, &ffn(reg, &p.ffn, &h));
    if let Some((_, af)) = adapters {
        r = add(&r, &adapter(reg, af, &h));
    }
    layer_norm(reg, &p.ffn_norm, &r)
}

pub fn max_abs(a: &Mat, b: &Tensor) -> f64 {
    let b = mat(b);
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()), "shape mismatch");
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn linear_named(reg: &ParamRegistry, prefix: &str) -> Linear {
    let weight = reg.id(&format!("{prefix}.weight")).unwrap_or_else(|| panic!("no {prefix}.weight"));
    let shape = reg.entry(weight).shape.clone();
    Linear {
        weight,
        bias: reg.id(&format!("{prefix}.bias")),
        d_in: shape[0],
        d_out: shape[1],
    }
}

pub fn norm_named(reg: &ParamRegistry, prefix: &str) -> Norm {
    Norm {
        gamma: reg.id(&format!("{prefix}.gamma")).unwrap(),
        beta: reg.id(&format!("{prefix}.beta")).unwrap(),
    }
}

pub fn block_named(reg: &ParamRegistry, prefix: &str, n_heads: usize) -> BlockParams {
    let lin = |s: &str| linear_named(reg, &format!("{prefix}.{s}"));
    let q = lin("attn.q");
    let d = q.d_in;
    BlockParams {
        attn: AttentionParams { q, k: lin("attn.k"), v: lin("attn.v"), o: lin("attn.o"), n_heads, d },
        attn_norm: norm_named(reg, &format!("{prefix}.attn_norm")),
        ffn: FeedForward { up: lin("ffn.up"), down: lin("ffn.down") },
        ffn_norm: norm_named(reg, &format!("{prefix}.ffn_norm")),
    }
}

/// Parameter counts written out term by term from the architecture, without
/// consulting the registry.
pub mod closed_form {
    use navpetl::model::{MethodConfig, ModelConfig};
    use navpetl::Method;

    pub fn lin(a: usize, b: usize) -> usize {
        a * b + b
    }

    pub fn norm(d: usize) -> usize {
        2 * d
    }

    pub fn attn(d: usize) -> usize {
        4 * lin(d, d)
    }

    pub fn ffn(d: usize) -> usize {
        lin(d, 4 * d) + lin(4 * d, d)
    }

    pub fn block(d: usize) -> usize {
        attn(d) + ffn(d) + 2 * norm(d)
    }

    pub fn cross_block(d: usize) -> usize {
        attn(d) + 2 * (attn(d) + ffn(d) + 3 * norm(d))
    }

    pub fn panorama(c: &ModelConfig) -> usize {
        let d = c.d_hidden;
        lin(c.d_img, d) + norm(d) + lin(c.d_ang, d) + norm(d)
    }

    pub fn head(d: usize) -> usize {
        lin(d, 1) + d
    }

    pub fn total_base(c: &ModelConfig) -> usize {
        let d = c.d_hidden;
        let lang = (c.vocab_size + c.max_instr_len + 2) * d + norm(d) + c.n_lang_layers * block(d);
        let hist = panorama(c) + c.max_history * d + d + c.n_hist_layers * block(d);
        lang + panorama(c) + hist + c.n_cross_layers * cross_block(d) + head(d)
    }

    pub fn adapter(d: usize, m: usize) -> usize {
        lin(d, m) + lin(m, d)
    }

    pub fn lora_pair(d: usize, r: usize) -> usize {
        2 * (d * r + r * d)
    }

    pub fn branch(d: usize, m: usize) -> usize {
        lin(d, m) + attn(m) + 1 + lin(m, d) + norm(d)
    }

    pub fn hib(d: usize, m: usize) -> usize {
        branch(d, m) + lin(d, m)
    }

    pub fn cib(d: usize, m: usize) -> usize {
        2 * branch(d, m)
    }

    fn attention_modules(c: &ModelConfig) -> usize {
        c.n_lang_layers + c.n_hist_layers + 3 * c.n_cross_layers
    }

    /// Base biases and norm shifts, plus the head.
    pub fn bitfit(c: &ModelConfig) -> usize {
        let d = c.d_hidden;
        let block_b = 4 * d + (4 * d + d) + 2 * d;
        let cross_b = 4 * d + 2 * (4 * d + 5 * d + 3 * d);
        let pano_b = 4 * d;
        d + c.n_lang_layers * block_b + 2 * pano_b + c.n_hist_layers * block_b + c.n_cross_layers * cross_b + head(d)
    }

    /// Parameters a method adds to the base model.
    pub fn added(c: &ModelConfig, mc: &MethodConfig) -> usize {
        let (d, m) = (c.d_hidden, mc.d_mid);
        let comp = mc.components;
        match mc.method {
            Method::Finetune | Method::BitFit => 0,
            Method::Prompt => 2 * mc.n_prompts * d,
            Method::Lora => attention_modules(c) * lora_pair(d, m),
            Method::Adapter => {
                (c.n_lang_layers + c.n_hist_layers) * 2 * adapter(d, m) + c.n_cross_layers * 6 * adapter(d, m)
            }
            Method::VlnPetl => {
                let mut n = 0;
                if comp.lea {
                    n += c.n_lang_layers * 2 * adapter(d, m);
                }
                if comp.hib {
                    n += c.n_hist_layers * hib(d, m);
                }
                if comp.cib {
                    n += c.n_cross_layers * cib(d, m);
                }
                if comp.lora {
                    n += attention_modules(c) * lora_pair(d, mc.lora_rank);
                }
                n
            }
        }
    }

    pub fn total(c: &ModelConfig, mc: &MethodConfig) -> usize {
        total_base(c) + added(c, mc)
    }

    pub fn trainable(c: &ModelConfig, mc: &MethodConfig) -> usize {
        let d = c.d_hidden;
        let host_norms = |blocks: usize, per: usize| blocks * per * norm(d);
        match mc.method {
            Method::Finetune => total(c, mc),
            Method::BitFit => bitfit(c),
            Method::Prompt | Method::Lora => added(c, mc) + head(d),
            Method::Adapter => {
                added(c, mc)
                    + host_norms(c.n_lang_layers + c.n_hist_layers, 2)
                    + host_norms(c.n_cross_layers, 6)
                    + head(d)
            }
            Method::VlnPetl => {
                let lea_norms = if mc.components.lea { host_norms(c.n_lang_layers, 2) } else { 0 };
                added(c, mc) + lea_norms + head(d)
            }
        }
    }
}

/// Teacher-forced per-step action logits of one episode.
pub fn rollout_logits(
    model: &navpetl::Model,
    env: &navpetl::trainer::Env<'_>,
    ep: &navpetl::world::Episode,
) -> Vec<Vec<f64>> {
    use navpetl::params::{Ctx, GradMode};
    let mut ctx = Ctx::new(model.registry(), GradMode::Off);
    let r = navpetl::trainer::il_rollout(&mut ctx, model, env, ep, &Default::default()).unwrap();
    r.logits.iter().map(|&l| ctx.value(l).data().to_vec()).collect()
}

pub fn max_diff_nested(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "different step counts");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "different logit counts");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Moves the added parameters off their neutral initial values.
pub fn perturb(model: &mut navpetl::Model) {
    navpetl::trainer::gradcheck::perturb_petl(model.registry_mut(), 77, 0.3).unwrap();
}

/// Minimum over every monotone alignment of `a` with `b`. Each alignment's
/// cost is accumulated from the first pair onward, so ties and rounding match
/// any prefix-based evaluation bit for bit.
pub fn dtw_brute(a: &[usize], b: &[usize], dist: &dyn Fn(usize, usize) -> f64) -> f64 {
    fn go(i: usize, j: usize, acc: f64, a: &[usize], b: &[usize], dist: &dyn Fn(usize, usize) -> f64) -> f64 {
        let acc = acc + dist(a[i], b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            return acc;
        }
        let mut best = f64::INFINITY;
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            if i + di < a.len() && j + dj < b.len() {
                best = best.min(go(i + di, j + dj, acc, a, b, dist));
            }
        }
        best
    }
    go(0, 0, 0.0, a, b, dist)
}

/// Every node sequence of length `1..=max_len` over `n` nodes.
pub fn all_sequences(n: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p| (0..n).map(move |v| [p.clone(), vec![v]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// Random walk of up to `max_moves` edges from `start`.
pub fn random_walk(g: &navpetl::world::WorldGraph, rng: &mut ChaCha8Rng, start: usize, max_moves: usize) -> Vec<usize> {
    let mut path = vec![start];
    for _ in 0..rng.gen_range(0..=max_moves) {
        let nbrs = &g.neighbors[*path.last().unwrap()];
        path.push(nbrs[rng.gen_range(0..nbrs.len())].node);
    }
    path
}
