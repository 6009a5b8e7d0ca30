//! Navigation metrics over executed trajectories: TL, NE, SR, SPL, OSR, GP,
//! nDTW and sDTW. All distances are geodesic on the world graph.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::world::WorldGraph;

pub const SUCCESS_THRESHOLD: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// Executed path; starts at `start`.
    pub path: Vec<usize>,
    pub reference: Vec<usize>,
    pub start: usize,
    pub goal: usize,
    pub d_th: f64,
}

impl TrajectoryRecord {
    pub fn new(path: Vec<usize>, reference: Vec<usize>) -> Result<Self> {
        let (Some(&start), Some(&goal)) = (reference.first(), reference.last()) else {
            return Err(Error::Input("reference path is empty".into()));
        };
        if path.first() != Some(&start) {
            return Err(Error::Input("executed path must begin at the start node".into()));
        }
        Ok(TrajectoryRecord {
            path,
            reference,
            start,
            goal,
            d_th: SUCCESS_THRESHOLD,
        })
    }

    fn last(&self) -> usize {
        *self.path.last().expect("executed path is non-empty")
    }
}

/// Sum of geodesic distances between consecutive nodes.
pub fn path_length(g: &WorldGraph, path: &[usize]) -> f64 {
    path.windows(2).map(|w| g.geodesic(w[0], w[1])).sum()
}

pub fn nav_error(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    g.geodesic(r.last(), r.goal)
}

/// 1 when the agent stops strictly closer than `d_th` to the goal.
pub fn success(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    if nav_error(g, r) < r.d_th {
        1.0
    } else {
        0.0
    }
}

/// 1 when any visited node is strictly closer than `d_th` to the goal.
pub fn oracle_success(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    let closest = r
        .path
        .iter()
        .map(|&n| g.geodesic(n, r.goal))
        .fold(f64::INFINITY, f64::min);
    if closest < r.d_th {
        1.0
    } else {
        0.0
    }
}

/// `S · l / max(p, l)`; equals `S` when both lengths are zero.
pub fn spl(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    let s = success(g, r);
    let shortest = g.geodesic(r.start, r.goal);
    let executed = path_length(g, &r.path);
    let denom = executed.max(shortest);
    if denom == 0.0 {
        s
    } else {
        s * shortest / denom
    }
}

pub fn goal_progress(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    g.geodesic(r.start, r.goal) - g.geodesic(r.last(), r.goal)
}

/// Dynamic time warping cost of aligning `a` with `b` under `dist`.
pub fn dtw(a: &[usize], b: &[usize], dist: impl Fn(usize, usize) -> f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = dist(ai, b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// `exp(−dtw / (|reference| · d_th))`.
pub fn ndtw(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    let cost = dtw(&r.path, &r.reference, |a, b| g.geodesic(a, b));
    (-cost / (r.reference.len() as f64 * r.d_th)).exp()
}

pub fn sdtw(g: &WorldGraph, r: &TrajectoryRecord) -> f64 {
    success(g, r) * ndtw(g, r)
}

/// Metrics of one record, or averages over many. SR, SPL and OSR are
/// fractions per record and percentages in an aggregate report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub osr: f64,
    pub gp: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 8] = ["TL", "NE", "SR", "SPL", "OSR", "GP", "nDTW", "sDTW"];

    pub fn values(&self) -> [f64; 8] {
        [self.tl, self.ne, self.sr, self.spl, self.osr, self.gp, self.ndtw, self.sdtw]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }

    /// `metric TAB value` lines with two decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            let _ = writeln!(out, "{name}\t{v:.2}");
        }
        out
    }
}

pub fn record_metrics(g: &WorldGraph, r: &TrajectoryRecord) -> MetricReport {
    MetricReport {
        tl: path_length(g, &r.path),
        ne: nav_error(g, r),
        sr: success(g, r),
        spl: spl(g, r),
        osr: oracle_success(g, r),
        gp: goal_progress(g, r),
        ndtw: ndtw(g, r),
        sdtw: sdtw(g, r),
    }
}

pub fn aggregate(g: &WorldGraph, records: &[TrajectoryRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Input("no trajectories to aggregate".into()));
    }
    let n = records.len() as f64;
    let mut sums = [0.0; 8];
    for r in records {
        for (s, v) in sums.iter_mut().zip(record_metrics(g, r).values()) {
            *s += v;
        }
    }
    let m = sums.map(|s| s / n);
    Ok(MetricReport {
        tl: m[0],
        ne: m[1],
        sr: 100.0 * m[2],
        spl: 100.0 * m[3],
        osr: 100.0 * m[4],
        gp: m[5],
        ndtw: m[6],
        sdtw: m[7],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> WorldGraph {
        let positions = (0..n).map(|i| (i as f64 * 2.0, 0.0)).collect();
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        WorldGraph::from_edges(0, positions, &edges).unwrap()
    }

    #[test]
    fn reaching_goal() {
        let g = line(4);
        let r = TrajectoryRecord::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3]).unwrap();
        let m = record_metrics(&g, &r);
        assert_eq!((m.ne, m.sr, m.osr, m.spl, m.ndtw), (0.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(m.gp, 6.0);
    }

    #[test]
    fn two_metres_short_still_succeeds() {
        let g = line(4);
        let r = TrajectoryRecord::new(vec![0, 1, 2], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(nav_error(&g, &r), 2.0);
        assert_eq!(success(&g, &r), 1.0);
    }

    #[test]
    fn dtw_single_nodes() {
        assert_eq!(dtw(&[0], &[1], |_, _| 5.0), 5.0);
    }
}
