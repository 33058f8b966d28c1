//! Wasserstein distances between occlusion histograms.
//!
//! Three routes are provided:
//!
//! - [`w1_1d`]: closed form for the bin-index ground metric, `Σ |CDF_P − CDF_Q|`,
//! - [`solve_transport`]: exact transportation problem for any cost matrix
//!   (successive shortest paths, intended for `b ≤ 256`),
//! - [`sinkhorn`]: entropic approximation in the log domain with ε-scaling.
//!
//! The ground metric defaults to bin-index distance `|i − j|`, so W1 values
//! are expressed in bins.

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::error::{Error, Result};
use crate::occlusion::{occlusion_histogram, Histogram};

/// Largest histogram handled by the exact solver.
pub const MAX_EXACT_BINS: usize = 256;
/// Accepted mismatch between total source and target mass.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// Accepted deviation of plan marginals from their histograms.
pub const MARGINAL_TOLERANCE: f64 = 1e-9;

const MASS_EPS: f64 = 1e-15;

/// Square ground-cost matrix over histogram bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    bins: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bins * bins {
            return Err(Error::ShapeMismatch {
                left: vec![bins, bins],
                right: vec![data.len()],
            });
        }
        for i in 0..bins {
            if data[i * bins + i] != 0.0 {
                return Err(Error::invalid(format!(
                    "cost diagonal entry {i} is not zero"
                )));
            }
            for j in 0..bins {
                let c = data[i * bins + j];
                if !(c.is_finite() && c >= 0.0) {
                    return Err(Error::invalid(format!(
                        "cost ({i},{j}) = {c} is not a non-negative number"
                    )));
                }
                if c != data[j * bins + i] {
                    return Err(Error::invalid(format!(
                        "cost matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { bins, data })
    }

    /// `|i − j|^power` on bin indices.
    pub fn bin_distance(bins: usize, power: f64) -> Self {
        Self::from_fn(bins, |i, j| (i.abs_diff(j) as f64).powf(power))
    }

    /// `(|i − j| / b)^power`: distance in occlusion fraction rather than bins.
    pub fn fraction_distance(bins: usize, power: f64) -> Self {
        Self::from_fn(bins, |i, j| {
            (i.abs_diff(j) as f64 / bins as f64).powf(power)
        })
    }

    fn from_fn(bins: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..bins * bins).map(|k| f(k / bins, k % bins)).collect();
        Self { bins, data }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.bins + j]
    }
}

/// Coupling between two histograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    bins: usize,
    matrix: Vec<f64>,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl TransportPlan {
    /// Validates non-negativity and both marginals against `MARGINAL_TOLERANCE`.
    fn checked(bins: usize, matrix: Vec<f64>, p: &Histogram, q: &Histogram) -> Result<Self> {
        if matrix.iter().any(|&m| m < 0.0) {
            return Err(Error::invalid("transport plan has negative mass"));
        }
        let plan = Self {
            bins,
            row_marginal: p.masses().to_vec(),
            col_marginal: q.masses().to_vec(),
            matrix,
        };
        let (row_err, col_err) = plan.marginal_errors();
        if row_err > MARGINAL_TOLERANCE || col_err > MARGINAL_TOLERANCE {
            return Err(Error::invalid(format!(
                "transport plan marginals off by {row_err:e} / {col_err:e}"
            )));
        }
        Ok(plan)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.bins + j]
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix
            .chunks(self.bins)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|j| (0..self.bins).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// Largest absolute deviation of row sums and of column sums from the
    /// target marginals.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let max_dev = |sums: Vec<f64>, target: &[f64]| {
            sums.iter()
                .zip(target)
                .map(|(s, t)| (s - t).abs())
                .fold(0.0, f64::max)
        };
        (
            max_dev(self.row_sums(), &self.row_marginal),
            max_dev(self.col_sums(), &self.col_marginal),
        )
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.matrix
            .iter()
            .enumerate()
            .map(|(k, m)| m * cost.data[k])
            .sum()
    }
}

fn check_same_bins(p: &Histogram, q: &Histogram) -> Result<()> {
    if p.bins() != q.bins() || p.edges() != q.edges() {
        return Err(Error::ShapeMismatch {
            left: vec![p.bins()],
            right: vec![q.bins()],
        });
    }
    Ok(())
}

/// W1 under the bin-index metric: `Σ_i |CDF_P(i) − CDF_Q(i)|`.
pub fn w1_1d(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_bins(p, q)?;
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for (a, b) in p.masses().iter().zip(q.masses()) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    // the final CDF difference is zero up to rounding and carries no distance
    Ok(total - cdf_gap.abs())
}

/// Exact optimal transport between `p` and `q` for an arbitrary cost.
///
/// Successive shortest augmenting paths with Dijkstra on reduced costs over
/// the dense bipartite residual graph.
pub fn solve_transport(
    p: &Histogram,
    q: &Histogram,
    cost: &CostMatrix,
) -> Result<(TransportPlan, f64)> {
    check_same_bins(p, q)?;
    let b = p.bins();
    if cost.bins() != b {
        return Err(Error::ShapeMismatch {
            left: vec![b, b],
            right: vec![cost.bins(), cost.bins()],
        });
    }
    if b > MAX_EXACT_BINS {
        return Err(Error::invalid(format!(
            "exact solver supports at most {MAX_EXACT_BINS} bins, got {b}"
        )));
    }
    let source_mass: f64 = p.masses().iter().sum();
    let target_mass: f64 = q.masses().iter().sum();
    if (source_mass - target_mass).abs() > FEASIBILITY_TOLERANCE {
        return Err(Error::Infeasible {
            source_mass,
            target_mass,
        });
    }

    let mut supply = p.masses().to_vec();
    let mut demand = q.masses().to_vec();
    let mut flow = vec![0.0; b * b];
    let mut pot_src = vec![0.0; b];
    let mut pot_snk = vec![0.0; b];

    let mut dist_src = vec![0.0; b];
    let mut dist_snk = vec![0.0; b];
    let mut done_src = vec![false; b];
    let mut done_snk = vec![false; b];
    // predecessor of a sink is a source (forward edge), of a source a sink
    // (reverse edge); None marks a root source
    let mut prev_snk = vec![usize::MAX; b];
    let mut prev_src: Vec<Option<usize>> = vec![None; b];

    loop {
        let supply_left = supply.iter().any(|&s| s > MASS_EPS);
        let demand_left = demand.iter().any(|&d| d > MASS_EPS);
        if !supply_left || !demand_left {
            break;
        }

        for i in 0..b {
            dist_src[i] = if supply[i] > MASS_EPS {
                0.0
            } else {
                f64::INFINITY
            };
            dist_snk[i] = f64::INFINITY;
            done_src[i] = false;
            done_snk[i] = false;
            prev_src[i] = None;
            prev_snk[i] = usize::MAX;
        }

        loop {
            // dense Dijkstra: pick the closest unsettled node
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..b {
                if !done_src[i] && dist_src[i] < best {
                    best = dist_src[i];
                    pick = Some((true, i));
                }
                if !done_snk[i] && dist_snk[i] < best {
                    best = dist_snk[i];
                    pick = Some((false, i));
                }
            }
            let Some((is_source, u)) = pick else { break };
            if is_source {
                done_src[u] = true;
                for j in 0..b {
                    if done_snk[j] {
                        continue;
                    }
                    let rc = (cost.get(u, j) + pot_src[u] - pot_snk[j]).max(0.0);
                    if best + rc < dist_snk[j] {
                        dist_snk[j] = best + rc;
                        prev_snk[j] = u;
                    }
                }
            } else {
                done_snk[u] = true;
                for i in 0..b {
                    if done_src[i] || flow[i * b + u] <= MASS_EPS {
                        continue;
                    }
                    let rc = (-cost.get(i, u) + pot_snk[u] - pot_src[i]).max(0.0);
                    if best + rc < dist_src[i] {
                        dist_src[i] = best + rc;
                        prev_src[i] = Some(u);
                    }
                }
            }
        }

        let target = (0..b)
            .filter(|&j| demand[j] > MASS_EPS && dist_snk[j].is_finite())
            .min_by(|&x, &y| dist_snk[x].total_cmp(&dist_snk[y]))
            .ok_or_else(|| Error::invalid("no augmenting path in transport residual graph"))?;
        let cap = dist_snk[target];
        for i in 0..b {
            if dist_src[i].is_finite() {
                pot_src[i] += dist_src[i].min(cap);
            }
            if dist_snk[i].is_finite() {
                pot_snk[i] += dist_snk[i].min(cap);
            }
        }

        // walk the path back to its root source and find the bottleneck
        let mut amount = demand[target];
        let mut sink = target;
        let root = loop {
            let src = prev_snk[sink];
            match prev_src[src] {
                Some(prev_sink) => {
                    amount = amount.min(flow[src * b + prev_sink]);
                    sink = prev_sink;
                }
                None => break src,
            }
        };
        amount = amount.min(supply[root]);

        let mut sink = target;
        loop {
            let src = prev_snk[sink];
            flow[src * b + sink] += amount;
            match prev_src[src] {
                Some(prev_sink) => {
                    flow[src * b + prev_sink] -= amount;
                    sink = prev_sink;
                }
                None => break,
            }
        }
        supply[root] -= amount;
        demand[target] -= amount;
    }

    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    let plan = TransportPlan::checked(b, flow, p, q)?;
    let objective = plan.cost(cost);
    Ok((plan, objective))
}

/// `W_p` under the bin-index metric via the exact solver.
pub fn wasserstein_p(p: &Histogram, q: &Histogram, power: f64) -> Result<f64> {
    if !(power >= 1.0) {
        return Err(Error::invalid(format!(
            "Wasserstein order must be >= 1, got {power}"
        )));
    }
    let (_, objective) = solve_transport(p, q, &CostMatrix::bin_distance(p.bins(), power))?;
    Ok(objective.powf(1.0 / power))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Transport cost `⟨γ, C⟩` of the entropic plan (entropy term excluded).
    pub cost: f64,
    /// Row-major `b×b` entropic plan, rounded onto the exact marginals.
    pub plan: Vec<f64>,
    pub iterations: usize,
    /// `marginal_error ≤ tol` at the target regularization.
    pub converged: bool,
    /// L1 deviation of the unrounded plan's row sums from `p` (column sums
    /// are exact after each full iteration).
    pub marginal_error: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport with regularization `epsilon`.
///
/// Runs in the log domain and anneals the regularization geometrically from
/// the largest cost down to `epsilon`, warm-starting the dual potentials.
/// `max_iter` bounds the total number of dual updates; running out of budget
/// is reported through [`SinkhornResult::converged`]. The final plan is
/// rounded onto the transport polytope (row scaling, column scaling, rank-one
/// correction), so its cost is that of a feasible coupling.
pub fn sinkhorn(
    p: &Histogram,
    q: &Histogram,
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    check_same_bins(p, q)?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    let b = p.bins();
    if cost.bins() != b {
        return Err(Error::ShapeMismatch {
            left: vec![b, b],
            right: vec![cost.bins(), cost.bins()],
        });
    }
    let rows: Vec<usize> = (0..b).filter(|&i| p.masses()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b).filter(|&j| q.masses()[j] > 0.0).collect();
    let log_a: Vec<f64> = rows.iter().map(|&i| p.masses()[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| q.masses()[j].ln()).collect();
    let c = |ri: usize, cj: usize| cost.get(rows[ri], cols[cj]);

    let mut f = vec![0.0; rows.len()];
    let mut g = vec![0.0; cols.len()];

    let max_cost = (0..b * b).map(|k| cost.data[k]).fold(0.0, f64::max);
    let mut eps = max_cost.max(epsilon);
    let mut iterations = 0;
    let mut marginal_error;
    let stage_tol = |eps: f64| if eps > epsilon { tol.max(1e-6) } else { tol };

    loop {
        loop {
            for (ri, fi) in f.iter_mut().enumerate() {
                let lse = log_sum_exp((0..cols.len()).map(|cj| (g[cj] - c(ri, cj)) / eps));
                *fi = eps * (log_a[ri] - lse);
            }
            for (cj, gj) in g.iter_mut().enumerate() {
                let lse = log_sum_exp((0..rows.len()).map(|ri| (f[ri] - c(ri, cj)) / eps));
                *gj = eps * (log_b[cj] - lse);
            }
            iterations += 1;
            marginal_error = (0..rows.len())
                .map(|ri| {
                    let row: f64 = (0..cols.len())
                        .map(|cj| ((f[ri] + g[cj] - c(ri, cj)) / eps).exp())
                        .sum();
                    (row - log_a[ri].exp()).abs()
                })
                .sum();
            if marginal_error <= stage_tol(eps) || iterations >= max_iter {
                break;
            }
        }
        if eps <= epsilon || iterations >= max_iter {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }

    let mut plan = vec![0.0; b * b];
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            plan[i * b + j] = ((f[ri] + g[cj] - c(ri, cj)) / eps).exp();
        }
    }
    round_to_marginals(&mut plan, p.masses(), q.masses());
    let total = (0..b * b).map(|k| plan[k] * cost.data[k]).sum();
    Ok(SinkhornResult {
        cost: total,
        plan,
        iterations,
        converged: eps <= epsilon && marginal_error <= tol,
        marginal_error,
    })
}

fn round_to_marginals(plan: &mut [f64], a: &[f64], b: &[f64]) {
    let n = a.len();
    for i in 0..n {
        let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
        if row > a[i] {
            let s = a[i] / row;
            plan[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
        }
    }
    for j in 0..n {
        let col: f64 = (0..n).map(|i| plan[i * n + j]).sum();
        if col > b[j] {
            let s = b[j] / col;
            (0..n).for_each(|i| plan[i * n + j] *= s);
        }
    }
    let err_a: Vec<f64> = (0..n)
        .map(|i| (a[i] - plan[i * n..(i + 1) * n].iter().sum::<f64>()).max(0.0))
        .collect();
    let err_b: Vec<f64> = (0..n)
        .map(|j| (b[j] - (0..n).map(|i| plan[i * n + j]).sum::<f64>()).max(0.0))
        .collect();
    let mass: f64 = err_a.iter().sum();
    if mass > 0.0 {
        for i in 0..n {
            for j in 0..n {
                plan[i * n + j] += err_a[i] * err_b[j] / mass;
            }
        }
    }
}

/// W1 between the occlusion histograms of two stages over `bins` shared bins.
pub fn stage_transition_distance(
    levels_t: &[f64],
    levels_next: &[f64],
    bins: usize,
) -> Result<f64> {
    if levels_t.is_empty() || levels_next.is_empty() {
        return Err(Error::Empty("stage occlusion levels"));
    }
    let p = occlusion_histogram(levels_t, bins)?;
    let q = occlusion_histogram(levels_next, bins)?;
    w1_1d(&p, &q)
}

/// `W1(S_t, S_{t+1})` for `t = 1..T−1`.
pub fn schedule_transitions(schedule: &CurriculumSchedule, bins: usize) -> Result<Vec<f64>> {
    (1..schedule.stages())
        .map(|t| {
            stage_transition_distance(
                &schedule.stage_levels(t)?,
                &schedule.stage_levels(t + 1)?,
                bins,
            )
        })
        .collect()
}

/// The same samples with the smallest stage count `≥ T` whose largest
/// transition distance is at most `threshold`.
pub fn refine_schedule(
    schedule: &CurriculumSchedule,
    bins: usize,
    threshold: f64,
) -> Result<CurriculumSchedule> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!(
            "transition threshold must be non-negative, got {threshold}"
        )));
    }
    for stages in schedule.stages()..=schedule.len() {
        let candidate = schedule.with_stages(stages)?;
        let worst = schedule_transitions(&candidate, bins)?
            .into_iter()
            .fold(0.0, f64::max);
        if worst <= threshold {
            return Ok(candidate);
        }
    }
    Err(Error::invalid(format!(
        "no stage count up to {} keeps every transition within W1 = {threshold}",
        schedule.len()
    )))
}
