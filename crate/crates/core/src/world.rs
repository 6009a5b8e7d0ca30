//! Synthetic navigation world: grid graphs with dropped edges, panoramic
//! observations, templated instructions and oracle paths.
//!
//! Headings are measured clockwise from north (+y) in radians. Nodes sit on a
//! grid with [`NODE_SPACING`] metres between neighbours.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NODE_SPACING: f64 = 2.0;
pub const MIN_HOPS: usize = 2;
pub const MAX_HOPS: usize = 6;
const MAX_RETRIES: usize = 100;
const TIE_TOL: f64 = 1e-9;

/// `[sin θ, cos θ, sin φ, cos φ]` repeated to fill `d_ang` values.
pub fn angle_features(heading: f64, elevation: f64, d_ang: usize) -> Vec<f64> {
    let base = [heading.sin(), heading.cos(), elevation.sin(), elevation.cos()];
    (0..d_ang).map(|i| base[i % 4]).collect()
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn signed_angle(a: f64) -> f64 {
    let r = wrap_angle(a);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub node: usize,
    pub heading: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldGraph {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub positions: Vec<(f64, f64)>,
    /// Per node, neighbours sorted by id.
    pub neighbors: Vec<Vec<Neighbor>>,
    /// All-pairs geodesic distances.
    dist: Vec<Vec<f64>>,
}

impl WorldGraph {
    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn geodesic(&self, a: usize, b: usize) -> f64 {
        self.dist[a][b]
    }

    fn check_node(&self, n: usize) -> Result<()> {
        if n >= self.node_count() {
            return Err(Error::Input(format!("node {n} not in world of {} nodes", self.node_count())));
        }
        Ok(())
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.neighbors.get(a)?.iter().find(|n| n.node == b).map(|n| n.distance)
    }

    /// Builds a graph from explicit positions and undirected edges, weighted by
    /// Euclidean distance.
    pub fn from_edges(seed: u64, positions: Vec<(f64, f64)>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::Input("world needs at least one node".into()));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Input(format!("bad edge ({a}, {b})")));
            }
            let (pa, pb) = (positions[a], positions[b]);
            let (dx, dy) = (pb.0 - pa.0, pb.1 - pa.1);
            let distance = dx.hypot(dy);
            if !(distance > 0.0) {
                return Err(Error::Input(format!("edge ({a}, {b}) has zero length")));
            }
            neighbors[a].push(Neighbor {
                node: b,
                heading: wrap_angle(dx.atan2(dy)),
                distance,
            });
            neighbors[b].push(Neighbor {
                node: a,
                heading: wrap_angle((-dx).atan2(-dy)),
                distance,
            });
        }
        for list in &mut neighbors {
            list.sort_by_key(|nb| nb.node);
        }
        let mut g = WorldGraph {
            seed,
            width: n,
            height: 1,
            positions,
            neighbors,
            dist: Vec::new(),
        };
        g.dist = (0..n).map(|s| dijkstra(&g, s)).collect();
        Ok(g)
    }
}

fn dijkstra(g: &WorldGraph, source: usize) -> Vec<f64> {
    let n = g.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n).filter(|&i| !done[i] && dist[i].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
        else {
            break;
        };
        done[u] = true;
        for nb in &g.neighbors[u] {
            let alt = dist[u] + nb.distance;
            if alt < dist[nb.node] {
                dist[nb.node] = alt;
            }
        }
    }
    dist
}

/// Breadth-first reachability from node 0.
pub fn is_connected(neighbors: &[Vec<Neighbor>]) -> bool {
    if neighbors.is_empty() {
        return true;
    }
    let mut seen = vec![false; neighbors.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for nb in &neighbors[u] {
            if !seen[nb.node] {
                seen[nb.node] = true;
                queue.push_back(nb.node);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Grid graph with each edge independently dropped, redrawn until connected.
pub fn generate_world(seed: u64, grid_w: usize, grid_h: usize, edge_drop_prob: f64) -> Result<WorldGraph> {
    if grid_w < 2 || grid_h < 2 {
        return Err(Error::Config(format!("grid must be at least 2x2, got {grid_w}x{grid_h}")));
    }
    if !(0.0..0.5).contains(&edge_drop_prob) {
        return Err(Error::Config(format!("edge drop probability must be in [0, 0.5), got {edge_drop_prob}")));
    }
    let positions: Vec<(f64, f64)> = (0..grid_h)
        .flat_map(|y| (0..grid_w).map(move |x| (x as f64 * NODE_SPACING, y as f64 * NODE_SPACING)))
        .collect();
    let mut all_edges = Vec::new();
    for y in 0..grid_h {
        for x in 0..grid_w {
            let id = y * grid_w + x;
            if x + 1 < grid_w {
                all_edges.push((id, id + 1));
            }
            if y + 1 < grid_h {
                all_edges.push((id, id + grid_w));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let kept: Vec<(usize, usize)> = all_edges
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() >= edge_drop_prob)
            .collect();
        let mut g = WorldGraph::from_edges(seed, positions.clone(), &kept)?;
        if is_connected(&g.neighbors) {
            g.width = grid_w;
            g.height = grid_h;
            return Ok(g);
        }
    }
    Err(Error::Generation(format!(
        "no connected {grid_w}x{grid_h} world after {MAX_RETRIES} draws at drop probability {edge_drop_prob}"
    )))
}

/// Minimal-length path; among equal-length paths the one that is
/// lexicographically smallest by node id.
pub fn shortest_path(g: &WorldGraph, a: usize, b: usize) -> Result<(Vec<usize>, f64)> {
    g.check_node(a)?;
    g.check_node(b)?;
    let to_b = &g.dist[b];
    if !to_b[a].is_finite() {
        return Err(Error::Input(format!("nodes {a} and {b} are not connected")));
    }
    let mut path = vec![a];
    let mut cur = a;
    while cur != b {
        let next = g.neighbors[cur]
            .iter()
            .find(|nb| (nb.distance + to_b[nb.node] - to_b[cur]).abs() <= TIE_TOL)
            .expect("a finite distance has a predecessor on some shortest path");
        cur = next.node;
        path.push(cur);
    }
    Ok((path, to_b[a]))
}

/// Panorama layout and feature widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub n_views: usize,
    pub d_img: usize,
    pub d_ang: usize,
}

impl ViewSpec {
    /// Grid headings are multiples of 90°, so `n_views` must be a multiple of
    /// four for every neighbour to sit alone at a view centre.
    pub fn new(n_views: usize, d_img: usize, d_ang: usize) -> Result<Self> {
        if n_views == 0 || !n_views.is_multiple_of(4) {
            return Err(Error::Config(format!("n_views must be a positive multiple of 4, got {n_views}")));
        }
        if d_img == 0 || d_ang == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(ViewSpec { n_views, d_img, d_ang })
    }

    pub fn sector(&self) -> f64 {
        TAU / self.n_views as f64
    }

    /// View whose sector contains relative heading `rel`.
    pub fn view_of(&self, rel: f64) -> usize {
        ((wrap_angle(rel) / self.sector()).round() as usize) % self.n_views
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub view_feats: Tensor,
    pub angle_feats: Tensor,
    pub candidate_mask: Vec<bool>,
    /// Neighbour seen in each view, if any.
    pub view_neighbor: Vec<Option<usize>>,
}

impl Observation {
    /// `(view, neighbour)` for each navigable view, in view order.
    pub fn candidates(&self) -> Vec<(usize, usize)> {
        self.view_neighbor
            .iter()
            .enumerate()
            .filter_map(|(v, n)| n.map(|n| (v, n)))
            .collect()
    }
}

const WALL_KEY: u64 = u64::MAX;

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic unit vector for a (world, neighbour-or-wall) key.
pub fn view_feature(world_seed: u64, key: Option<usize>, d_img: usize) -> Vec<f64> {
    let key = key.map_or(WALL_KEY, |k| k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(world_seed, key));
    loop {
        let v: Vec<f64> = (0..d_img).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Panorama at `node` for an agent facing `heading`; view 0 looks straight ahead.
pub fn render_observation(g: &WorldGraph, node: usize, heading: f64, spec: &ViewSpec) -> Result<Observation> {
    g.check_node(node)?;
    let n = spec.n_views;
    let mut view_neighbor = vec![None; n];
    for nb in &g.neighbors[node] {
        let v = spec.view_of(nb.heading - heading);
        if view_neighbor[v].is_some() {
            return Err(Error::Generation(format!("two neighbours of node {node} share view {v}")));
        }
        view_neighbor[v] = Some(nb.node);
    }
    let mut views = Vec::with_capacity(n * spec.d_img);
    let mut angles = Vec::with_capacity(n * spec.d_ang);
    for (v, nb) in view_neighbor.iter().enumerate() {
        views.extend(view_feature(g.seed, *nb, spec.d_img));
        angles.extend(angle_features(v as f64 * spec.sector(), 0.0, spec.d_ang));
    }
    Ok(Observation {
        view_feats: Tensor::matrix(n, spec.d_img, views)?,
        angle_feats: Tensor::matrix(n, spec.d_ang, angles)?,
        candidate_mask: view_neighbor.iter().map(Option::is_some).collect(),
        view_neighbor,
    })
}

/// Agent position while following an instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub node: usize,
    pub heading: f64,
    pub done: bool,
    pub path: Vec<usize>,
    /// Rotation performed by the last move, in `(−π, π]`.
    pub last_turn: f64,
}

impl NavState {
    pub fn new(start: usize) -> Self {
        NavState {
            node: start,
            heading: 0.0,
            done: false,
            path: vec![start],
            last_turn: 0.0,
        }
    }
}

/// Applies an action index: `i < k` moves to the `i`-th candidate, `i == k` stops.
pub fn step(g: &WorldGraph, spec: &ViewSpec, state: &NavState, action_index: usize) -> Result<NavState> {
    if state.done {
        return Err(Error::State("episode already stopped".into()));
    }
    let obs = render_observation(g, state.node, state.heading, spec)?;
    let cands = obs.candidates();
    let mut next = state.clone();
    if action_index == cands.len() {
        next.done = true;
        return Ok(next);
    }
    let &(_, nb) = cands
        .get(action_index)
        .ok_or_else(|| Error::Input(format!("action {action_index} is not among {} candidates or STOP", cands.len())))?;
    let edge = g.neighbors[state.node].iter().find(|n| n.node == nb).expect("candidate is a neighbour");
    next.last_turn = signed_angle(edge.heading - state.heading);
    next.heading = edge.heading;
    next.node = nb;
    next.path.push(nb);
    Ok(next)
}

/// Action index that follows `path` from `state` (STOP once at the end).
pub fn oracle_action(g: &WorldGraph, spec: &ViewSpec, state: &NavState, path: &[usize]) -> Result<usize> {
    let obs = render_observation(g, state.node, state.heading, spec)?;
    let cands = obs.candidates();
    let pos = state.path.len() - 1;
    match path.get(pos + 1) {
        None => Ok(cands.len()),
        Some(&target) => cands
            .iter()
            .position(|&(_, n)| n == target)
            .ok_or_else(|| Error::Contract(format!("node {target} is not adjacent to {}", state.node))),
    }
}

/// Instruction vocabulary.
pub const VOCAB: [&str; 12] = [
    "[pad]", "go", "then", "stop", "north", "east", "south", "west", "forward", "right", "back", "left",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("[unk]"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn quadrant(angle: f64) -> usize {
    ((wrap_angle(angle) / (PI / 2.0)).round() as usize) % 4
}

/// `go <dir> then` per hop and a final `stop`. The first direction is absolute
/// (the agent starts facing north); later ones are relative to the last move.
pub fn render_instruction(g: &WorldGraph, path: &[usize]) -> Vec<usize> {
    const ABS: [&str; 4] = ["north", "east", "south", "west"];
    const REL: [&str; 4] = ["forward", "right", "back", "left"];
    let id = |w: &str| token_id(w).expect("word in vocabulary");
    let mut out = Vec::with_capacity(3 * path.len() + 1);
    let mut heading = 0.0;
    for (k, pair) in path.windows(2).enumerate() {
        let edge = g.neighbors[pair[0]].iter().find(|n| n.node == pair[1]).expect("path follows edges");
        let word = if k == 0 {
            ABS[quadrant(edge.heading)]
        } else {
            REL[quadrant(edge.heading - heading)]
        };
        heading = edge.heading;
        out.extend([id("go"), id(word), id("then")]);
    }
    out.push(id("stop"));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub world_seed: u64,
    pub start: usize,
    pub goal: usize,
    pub path: Vec<usize>,
    pub instruction: Vec<usize>,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }

    pub fn shortest_length(&self, g: &WorldGraph) -> f64 {
        g.geodesic(self.start, self.goal)
    }
}

/// Samples a start/goal pair `MIN_HOPS..=MAX_HOPS` hops apart and its oracle path.
pub fn generate_episode(g: &WorldGraph, seed: u64) -> Result<Episode> {
    let n = g.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(g.seed, seed));
    let any_pair = (0..n).any(|a| (0..n).any(|b| hop_ok(g, a, b)));
    if !any_pair {
        return Err(Error::Generation(format!(
            "no node pair is {MIN_HOPS}..={MAX_HOPS} hops apart"
        )));
    }
    loop {
        let start = rng.gen_range(0..n);
        let goal = rng.gen_range(0..n);
        if !hop_ok(g, start, goal) {
            continue;
        }
        let (path, _) = shortest_path(g, start, goal)?;
        let instruction = render_instruction(g, &path);
        return Ok(Episode {
            world_seed: g.seed,
            start,
            goal,
            path,
            instruction,
        });
    }
}

fn hop_ok(g: &WorldGraph, a: usize, b: usize) -> bool {
    let hops = (g.geodesic(a, b) / NODE_SPACING).round() as usize;
    (MIN_HOPS..=MAX_HOPS).contains(&hops) && g.geodesic(a, b).is_finite()
}

/// Which episode seeds a split draws from; the two ranges never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

const UNSEEN_SEED_OFFSET: u64 = 1 << 32;

impl Split {
    pub fn episode_seed(self, index: usize) -> u64 {
        match self {
            Split::Seen => index as u64,
            Split::Unseen => UNSEEN_SEED_OFFSET + index as u64,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            _ => Err(Error::Config(format!("unknown split {s:?}; valid splits: seen, unseen"))),
        }
    }
}

pub fn generate_dataset(g: &WorldGraph, split: Split, count: usize) -> Result<Vec<Episode>> {
    (0..count).map(|i| generate_episode(g, split.episode_seed(i))).collect()
}

pub fn format_episode(e: &Episode) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>();
    format!(
        "{}\t{}\t{}\t{}\t{}",
        e.world_seed,
        e.start,
        e.goal,
        join(&e.path).join(","),
        join(&e.instruction).join(" ")
    )
}

pub fn parse_episode(line: &str) -> Result<Episode> {
    let bad = |what: &str| Error::Input(format!("malformed episode line ({what}): {line:?}"));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(bad("expected 5 tab-separated fields"));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(what));
    let list = |s: &str, sep: char, what: &str| -> Result<Vec<usize>> {
        s.split(sep).map(|t| num(t, what)).collect()
    };
    let e = Episode {
        world_seed: fields[0].parse().map_err(|_| bad("world seed"))?,
        start: num(fields[1], "start")?,
        goal: num(fields[2], "goal")?,
        path: list(fields[3], ',', "path")?,
        instruction: list(fields[4], ' ', "instruction")?,
    };
    if e.path.first() != Some(&e.start) || e.path.last() != Some(&e.goal) {
        return Err(bad("path endpoints"));
    }
    Ok(e)
}

/// Checks that an episode is consistent with `g`: edges exist and the path is shortest.
pub fn validate_episode(g: &WorldGraph, e: &Episode) -> Result<()> {
    if e.world_seed != g.seed {
        return Err(Error::Input(format!("episode is for world {}, not {}", e.world_seed, g.seed)));
    }
    for &n in &e.path {
        g.check_node(n)?;
    }
    let mut length = 0.0;
    for pair in e.path.windows(2) {
        length += g
            .edge_length(pair[0], pair[1])
            .ok_or_else(|| Error::Input(format!("no edge {} - {}", pair[0], pair[1])))?;
    }
    if (length - g.geodesic(e.start, e.goal)).abs() > TIE_TOL {
        return Err(Error::Input("episode path is not a shortest path".into()));
    }
    Ok(())
}

pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = String::new();
    for e in episodes {
        let _ = writeln!(out, "{}", format_episode(e));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_episode).collect()
}

/// Distinct world seeds referenced by a dataset.
pub fn world_seeds(episodes: &[Episode]) -> BTreeSet<u64> {
    episodes.iter().map(|e| e.world_seed).collect()
}
