//! Time-varying communication graphs and doubly stochastic mixing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};

pub type Edge = (usize, usize);

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Static(Vec<Edge>),
    /// Complete graph when `t % period == 0`, no edges otherwise.
    Federated { period: usize },
    /// Edge sets used cyclically.
    Periodic(Vec<Vec<Edge>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSchedule {
    n_agents: usize,
    kind: ScheduleKind,
    window: usize,
}

fn normalize_edges(n_agents: usize, edges: &[Edge]) -> Result<Vec<Edge>> {
    let mut out = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a == b || a >= n_agents || b >= n_agents {
            return Err(CacError::InvalidModel(format!(
                "edge ({a}, {b}) is not valid on {n_agents} agents"
            )));
        }
        let e = (a.min(b), a.max(b));
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn complete_edges(n_agents: usize) -> Vec<Edge> {
    (0..n_agents)
        .flat_map(|i| (i + 1..n_agents).map(move |j| (i, j)))
        .collect()
}

pub fn ring_edges(n_agents: usize) -> Vec<Edge> {
    match n_agents {
        0 | 1 => vec![],
        2 => vec![(0, 1)],
        n => (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect(),
    }
}

pub fn path_edges(n_agents: usize) -> Vec<Edge> {
    (1..n_agents).map(|i| (i - 1, i)).collect()
}

impl GraphSchedule {
    pub fn fixed(n_agents: usize, edges: &[Edge]) -> Result<Self> {
        Ok(Self {
            n_agents,
            kind: ScheduleKind::Static(normalize_edges(n_agents, edges)?),
            window: 1,
        })
    }

    pub fn federated(n_agents: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(CacError::InvalidModel("federated period must be at least 1".into()));
        }
        Ok(Self {
            n_agents,
            kind: ScheduleKind::Federated { period },
            window: period,
        })
    }

    /// Even and odd matchings of the path `0 - 1 - ... - (N-1)` on
    /// alternating steps.
    pub fn alternating(n_agents: usize) -> Result<Self> {
        let path = path_edges(n_agents);
        let even: Vec<Edge> = path.iter().copied().filter(|(a, _)| a % 2 == 0).collect();
        let odd: Vec<Edge> = path.iter().copied().filter(|(a, _)| a % 2 == 1).collect();
        Self::custom(n_agents, vec![even, odd])
    }

    pub fn custom(n_agents: usize, edge_sets: Vec<Vec<Edge>>) -> Result<Self> {
        if edge_sets.is_empty() {
            return Err(CacError::InvalidModel("custom schedule needs at least one edge set".into()));
        }
        let sets = edge_sets
            .iter()
            .map(|e| normalize_edges(n_agents, e))
            .collect::<Result<Vec<_>>>()?;
        let window = sets.len();
        Ok(Self {
            n_agents,
            kind: ScheduleKind::Periodic(sets),
            window,
        })
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of steps after which the edge sets repeat.
    pub fn cycle_len(&self) -> usize {
        match &self.kind {
            ScheduleKind::Static(_) => 1,
            ScheduleKind::Federated { period } => *period,
            ScheduleKind::Periodic(sets) => sets.len(),
        }
    }

    pub fn edges_at(&self, t: usize) -> Vec<Edge> {
        match &self.kind {
            ScheduleKind::Static(e) => e.clone(),
            ScheduleKind::Federated { period } => {
                if t % period == 0 {
                    complete_edges(self.n_agents)
                } else {
                    vec![]
                }
            }
            ScheduleKind::Periodic(sets) => sets[t % sets.len()].clone(),
        }
    }

    pub fn weights_at(&self, t: usize, rule: WeightRule) -> WeightMatrix {
        rule.build(&self.edges_at(t), self.n_agents)
    }

    /// One weight matrix per step of the cycle; step `t` uses entry
    /// `t % cycle_len()`.
    pub fn weight_cycle(&self, rule: WeightRule) -> Vec<WeightMatrix> {
        (0..self.cycle_len()).map(|t| self.weights_at(t, rule)).collect()
    }

    /// Smallest positive entry over every matrix the schedule produces.
    pub fn positivity_floor(&self, rule: WeightRule) -> f64 {
        self.weight_cycle(rule)
            .iter()
            .map(|w| w.positivity_floor)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// `W_ij = 1 / (1 + max(d_i, d_j))` on edges.
    #[default]
    Metropolis,
    /// `W_ij = 1 / (1 + d_max)` on edges.
    MaxDegree,
}

impl WeightRule {
    /// Complete graphs always get the exact averaging matrix.
    pub fn build(self, edges: &[Edge], n_agents: usize) -> WeightMatrix {
        if n_agents > 1 && edges.len() == n_agents * (n_agents - 1) / 2 {
            let entries = DMatrix::from_element(n_agents, n_agents, 1.0 / n_agents as f64);
            return WeightMatrix::from_entries(entries);
        }
        let mut degree = vec![0usize; n_agents];
        for &(a, b) in edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let d_max = degree.iter().copied().max().unwrap_or(0);
        let mut w = DMatrix::zeros(n_agents, n_agents);
        for &(a, b) in edges {
            let v = match self {
                Self::Metropolis => 1.0 / (1 + degree[a].max(degree[b])) as f64,
                Self::MaxDegree => 1.0 / (1 + d_max) as f64,
            };
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..n_agents {
            let off: f64 = (0..n_agents).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        WeightMatrix::from_entries(w)
    }
}

pub fn metropolis_weights(edges: &[Edge], n_agents: usize) -> WeightMatrix {
    WeightRule::Metropolis.build(edges, n_agents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub entries: DMatrix<f64>,
    pub positivity_floor: f64,
}

impl WeightMatrix {
    pub fn from_entries(entries: DMatrix<f64>) -> Self {
        let positivity_floor = entries
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        Self {
            entries,
            positivity_floor,
        }
    }

    pub fn identity(n_agents: usize) -> Self {
        Self::from_entries(DMatrix::identity(n_agents, n_agents))
    }

    pub fn n_agents(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_identity(&self) -> bool {
        self.entries == DMatrix::identity(self.n_agents(), self.n_agents())
    }

    /// Checks double stochasticity, the positivity floor on the diagonal and
    /// on `edges`, and zeros elsewhere. `t` only labels the error.
    pub fn validate(&self, edges: &[Edge], t: usize) -> Result<()> {
        let n = self.n_agents();
        let fail = |reason: String| Err(CacError::WeightMatrix { t, reason });
        if self.entries.ncols() != n {
            return fail(format!("matrix is {}x{}", n, self.entries.ncols()));
        }
        let c = self.positivity_floor;
        if !(c > 0.0) {
            return fail(format!("positivity floor {c} is not positive"));
        }
        for i in 0..n {
            let row: f64 = self.entries.row(i).sum();
            let col: f64 = self.entries.column(i).sum();
            if (row - 1.0).abs() > SUM_TOL {
                return fail(format!("row {i} sums to {row}"));
            }
            if (col - 1.0).abs() > SUM_TOL {
                return fail(format!("column {i} sums to {col}"));
            }
            for j in 0..n {
                let v = self.entries[(i, j)];
                let linked = i == j || edges.contains(&(i.min(j), i.max(j)));
                if linked && v < c {
                    return fail(format!("entry ({i}, {j}) = {v} is below the floor {c}"));
                }
                if !linked && v != 0.0 {
                    return fail(format!("entry ({i}, {j}) = {v} but agents {i} and {j} are not linked"));
                }
                if v < 0.0 || (i != j && v >= 1.0) {
                    return fail(format!("entry ({i}, {j}) = {v} is out of range"));
                }
            }
        }
        Ok(())
    }
}

/// `W X`: each column of the stacked per-agent rows is mixed independently.
pub fn consensus_apply(weights: &WeightMatrix, stacked: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if stacked.nrows() != weights.n_agents() {
        return Err(CacError::Dimension {
            context: "consensus rows",
            expected: weights.n_agents(),
            actual: stacked.nrows(),
        });
    }
    if stacked.ncols() == 0 || weights.is_identity() {
        return Ok(stacked.clone());
    }
    Ok(&weights.entries * stacked)
}

/// `Q = I - (1/N) 1 1^T`.
pub fn disagreement_operator(n_agents: usize) -> DMatrix<f64> {
    DMatrix::identity(n_agents, n_agents)
        - DMatrix::from_element(n_agents, n_agents, 1.0 / n_agents as f64)
}

/// `Q X`, each row minus the row mean.
pub fn disagreement(stacked: &DMatrix<f64>) -> DMatrix<f64> {
    let n = stacked.nrows();
    if n == 0 {
        return stacked.clone();
    }
    let mean = stacked.row_sum() / n as f64;
    let mut out = stacked.clone();
    for i in 0..n {
        let mut row = out.row_mut(i);
        row -= &mean;
    }
    out
}

/// Squared Frobenius norm of `Q X`.
pub fn disagreement_norm_sq(stacked: &DMatrix<f64>) -> f64 {
    disagreement(stacked).norm_squared()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityReport {
    pub window: usize,
    pub windows_checked: usize,
    /// First window `[start, end]` whose union graph is disconnected.
    pub first_failure: Option<(usize, usize)>,
}

impl ConnectivityReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    pub fn into_result(self) -> Result<()> {
        match self.first_failure {
            None => Ok(()),
            Some((start, end)) => Err(CacError::Disconnected { start, end }),
        }
    }
}

/// Checks that each window `[l B, (l+1) B - 1]` within `horizon` has a
/// connected union graph.
pub fn verify_connectivity(schedule: &GraphSchedule, window: usize, horizon: usize) -> ConnectivityReport {
    let window = window.max(1);
    let n = schedule.n_agents();
    let n_windows = (horizon / window).max(1);
    // windows repeat once l B returns to the same phase of the cycle
    let distinct = schedule.cycle_len() / gcd(schedule.cycle_len(), window);
    let to_check = n_windows.min(distinct.max(1));
    for l in 0..to_check {
        let start = l * window;
        let end = start + window - 1;
        let mut uf = UnionFind::new(n);
        for t in start..=end {
            for (a, b) in schedule.edges_at(t) {
                uf.union(a, b);
            }
        }
        let root = if n > 0 { uf.find(0) } else { 0 };
        if (0..n).any(|i| uf.find(i) != root) {
            return ConnectivityReport {
                window,
                windows_checked: l + 1,
                first_failure: Some((start, end)),
            };
        }
    }
    ConnectivityReport {
        window,
        windows_checked: to_check,
        first_failure: None,
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest observed `||W_{t+B-1} ... W_t Q x|| / ||Q x||` over random
/// Gaussian `x` and every aligned window phase of the schedule.
pub fn measure_contraction<R: Rng + ?Sized>(
    schedule: &GraphSchedule,
    rule: WeightRule,
    window: usize,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let n = schedule.n_agents();
    let window = window.max(1);
    let phases = schedule.cycle_len() / gcd(schedule.cycle_len(), window);
    let products: Vec<DMatrix<f64>> = (0..phases.max(1))
        .map(|l| {
            let mut prod = DMatrix::identity(n, n);
            for t in l * window..(l + 1) * window {
                prod = &schedule.weights_at(t, rule).entries * prod;
            }
            prod
        })
        .collect();
    let q = disagreement_operator(n);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qx = &q * x;
        let base = qx.norm();
        if base <= 1e-12 {
            continue;
        }
        for prod in &products {
            worst = worst.max((prod * &qx).norm() / base);
        }
    }
    worst
}

/// Constants of the consensus analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// `sqrt(1 - c / (2 N^2))`, per-window contraction.
    pub eta_contraction: f64,
    /// `eta^(1/B)`, per-step contraction.
    pub rho: f64,
    /// `3 R_max + 3 (1 + gamma) R_omega`.
    pub l_b: f64,
    /// `N C_psi (R_lambda + (1 + gamma) R_omega)`.
    pub ell_p: f64,
    /// `R_lambda + (1 + gamma) R_omega`.
    pub c_delta: f64,
    pub n_agents: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub positivity_floor: f64,
    pub n_agents: usize,
    pub window: usize,
    pub reward_bound: f64,
    pub discount: f64,
    pub radius_omega: f64,
    pub radius_lambda: f64,
    pub score_bound: f64,
}

impl BoundConstants {
    pub fn new(inputs: BoundInputs) -> Result<Self> {
        let BoundInputs {
            positivity_floor: c,
            n_agents,
            window,
            reward_bound,
            discount,
            radius_omega,
            radius_lambda,
            score_bound,
        } = inputs;
        if !(c > 0.0 && c <= 1.0) || n_agents == 0 || window == 0 {
            return Err(CacError::InvalidModel(format!(
                "contraction needs c in (0, 1], N >= 1, B >= 1; got c = {c}, N = {n_agents}, B = {window}"
            )));
        }
        let n = n_agents as f64;
        let eta = (1.0 - c / (2.0 * n * n)).sqrt();
        let c_delta = radius_lambda + (1.0 + discount) * radius_omega;
        Ok(Self {
            eta_contraction: eta,
            rho: eta.powf(1.0 / window as f64),
            l_b: 3.0 * reward_bound + 3.0 * (1.0 + discount) * radius_omega,
            ell_p: n * score_bound * c_delta,
            c_delta,
            n_agents,
            window,
        })
    }

    /// Upper bound on `||Q omega_t|| + ||Q lambda_t||` at step `t` for a
    /// run with critic stepsizes `beta0 / T^sigma2` and `zeta0 / T^sigma2`.
    pub fn consensus_error_bound(
        &self,
        t: usize,
        initial_norm: f64,
        beta0: f64,
        zeta0: f64,
        horizon: usize,
        sigma2: f64,
    ) -> f64 {
        let eta = self.eta_contraction;
        let rho = self.rho;
        let transient = rho.powf(t as f64) * initial_norm / eta;
        let steady = 2.0 * self.n_agents as f64 * self.l_b * (beta0 + zeta0)
            / (eta * (1.0 - rho) * (horizon as f64).powf(sigma2));
        transient + steady
    }
}
