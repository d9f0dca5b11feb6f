// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparsity / recovery sweeps comparing the two attribution methods.

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attribute, leaf_sum_evaluate, AttributionOptions, Method};
use crate::lingraph::LinearGraph;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub tau: f64,
    pub mean_nodes: f64,
    pub mean_recovery: f64,
    pub n_inputs: usize,
}

/// Recovery of both methods at one node count: the standard curve's own
/// grid point against the hierarchical curve interpolated to the same node
/// count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub nodes: f64,
    pub standard: f64,
    pub hierarchical: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub points: Vec<SweepPoint>,
    pub comparisons: Vec<Comparison>,
}

/// `0` followed by `n - 1` thresholds spaced geometrically from `lo` to `hi`.
pub fn default_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut g = vec![0.0];
    if n > 1 {
        let k = (n - 2).max(1) as f64;
        for i in 0..n - 1 {
            g.push(lo * (hi / lo).powf(i as f64 / k));
        }
    }
    g.truncate(n);
    g
}

/// Linear interpolation of `y` at `x` along points sorted by `x`. `None`
/// outside the covered range.
fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let (first, last) = (curve.first()?, curve.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            if x1 == x0 {
                return Some(y0.max(y1));
            }
            return Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        }
    }
    Some(first.1)
}

impl ThresholdSweep {
    pub fn curve(&self, method: Method) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(move |p| p.method == method)
    }

    /// Share of comparisons where hierarchical recovery is at least the
    /// standard one. `None` when no node count is covered by both curves.
    pub fn dominance(&self) -> Option<f64> {
        if self.comparisons.is_empty() {
            return None;
        }
        let wins = self
            .comparisons
            .iter()
            .filter(|c| c.hierarchical >= c.standard - 1e-12)
            .count();
        Some(wins as f64 / self.comparisons.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,tau,mean_nodes,mean_recovery,n_inputs\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{}",
                p.method.as_str(),
                p.tau,
                p.mean_nodes,
                p.mean_recovery,
                p.n_inputs
            );
        }
        s
    }

    /// Parses [`ThresholdSweep::to_csv`] output; comparisons are recomputed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("method,tau,mean_nodes,mean_recovery,n_inputs") {
            return Err(Error::Format("unexpected sweep CSV header".into()));
        }
        let bad = |l: &str| Error::Format(format!("bad sweep CSV row {l:?}"));
        let mut points = Vec::new();
        for l in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            points.push(SweepPoint {
                method: Method::parse(f[0])?,
                tau: num(f[1])?,
                mean_nodes: num(f[2])?,
                mean_recovery: num(f[3])?,
                n_inputs: f[4].parse().map_err(|_| bad(l))?,
            });
        }
        let comparisons = compare(&points);
        Ok(ThresholdSweep { points, comparisons })
    }
}

fn compare(points: &[SweepPoint]) -> Vec<Comparison> {
    let mut hier: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.method == Method::Hierarchical)
        .map(|p| (p.mean_nodes, p.mean_recovery))
        .collect();
    hier.sort_by(|a, b| a.0.total_cmp(&b.0));
    points
        .iter()
        .filter(|p| p.method == Method::Standard)
        .filter_map(|p| {
            interpolate(&hier, p.mean_nodes).map(|h| Comparison {
                nodes: p.mean_nodes,
                standard: p.mean_recovery,
                hierarchical: h,
            })
        })
        .collect()
}

/// Runs both methods on every graph at every threshold and averages node
/// counts and recoveries per (method, τ). Graphs are processed in parallel.
pub fn sparsity_sweep(graphs: &[LinearGraph], grid: &[f64], base: &AttributionOptions) -> Result<ThresholdSweep> {
    sparsity_sweep_with(graphs.len(), grid, base, |i| Ok(std::borrow::Cow::Borrowed(&graphs[i])))
}

/// [`sparsity_sweep`] over `count` graphs produced on demand, so that only
/// the graphs in flight are held in memory.
pub fn sparsity_sweep_with<'a, F>(count: usize, grid: &[f64], base: &AttributionOptions, graph_at: F) -> Result<ThresholdSweep>
where
    F: Fn(usize) -> Result<std::borrow::Cow<'a, LinearGraph>> + Sync,
{
    if count == 0 {
        return Err(Error::InvalidInput("sweep needs at least one graph".into()));
    }
    let per_graph: Vec<Vec<(Method, usize, f64, f64)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let g = graph_at(i)?;
            let mut rows = Vec::with_capacity(2 * grid.len());
            for method in [Method::Standard, Method::Hierarchical] {
                for (k, &tau) in grid.iter().enumerate() {
                    let r = attribute(&g, method, &AttributionOptions { tau, ..*base });
                    rows.push((method, k, r.surviving_count() as f64, leaf_sum_evaluate(&r)?));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let n = count as f64;
    let mut points = Vec::new();
    for method in [Method::Standard, Method::Hierarchical] {
        for (k, &tau) in grid.iter().enumerate() {
            let (mut nodes, mut rec) = (0.0, 0.0);
            for rows in &per_graph {
                let &(_, _, c, r) = rows
                    .iter()
                    .find(|(m, kk, _, _)| *m == method && *kk == k)
                    .expect("every grid point evaluated");
                nodes += c;
                rec += r;
            }
            points.push(SweepPoint {
                method,
                tau,
                mean_nodes: nodes / n,
                mean_recovery: rec / n,
                n_inputs: count,
            });
        }
    }
    let comparisons = compare(&points);
    Ok(ThresholdSweep { points, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = default_grid(30, 1e-3, 1.0);
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1e-3).abs() < 1e-15);
        assert!((g[29] - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn interpolation() {
        let c = [(1.0, 0.0), (3.0, 1.0)];
        assert_eq!(interpolate(&c, 2.0), Some(0.5));
        assert_eq!(interpolate(&c, 0.5), None);
    }

    #[test]
    fn csv_round_trip() {
        let p = |method, tau, nodes, rec| SweepPoint {
            method,
            tau,
            mean_nodes: nodes,
            mean_recovery: rec,
            n_inputs: 2,
        };
        let s = ThresholdSweep {
            points: vec![
                p(Method::Standard, 0.0, 10.0, 1.0),
                p(Method::Standard, 0.1, 5.0, 0.5),
                p(Method::Hierarchical, 0.0, 10.0, 1.0),
                p(Method::Hierarchical, 0.1, 4.0, 0.7),
            ],
            comparisons: Vec::new(),
        };
        let back = ThresholdSweep::from_csv(&s.to_csv()).unwrap();
        assert_eq!(back.points, s.points);
        assert_eq!(back.comparisons.len(), 2);
        assert_eq!(back.dominance(), Some(1.0));
    }
}
