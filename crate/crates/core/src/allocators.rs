//! Outer block-coordinate loops for the three allocation problems, plus the
//! full-reuse and conservative baselines.
//!
//! Each loop alternates convex block solves (with utilizations frozen) and a
//! utilization fixed-point update (with the allocation frozen), starting from
//! the all-busy state `ρ = 1 - δ`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::allocation::{x_index, Allocation};
use crate::convex::{self, EntrySpec, Polytope, QueueSpec, SolveStatus, SolverOptions, SubproblemSpec};
use crate::error::{Error, Result};
use crate::pattern::{pattern_count, Pattern};
use crate::queueing::{
    self, busy_probs, conditional_weights, FixedPoint, FixedPointOptions, FlexSystem, RateTable, UtilState,
};
use crate::report::DelayReport;
use crate::sched::{Collapsed, Kernel};
use crate::scenario::{Association, Scenario};

/// Largest AP count for the fixed-association problems.
pub const MAX_APS_FIXED: usize = 8;
/// Largest AP count for the flexible-association problem.
pub const MAX_APS_FLEX: usize = 6;
/// Largest UE-group count for the flexible-association problem.
pub const MAX_GROUPS_FLEX: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    /// Slow-timescale spectrum allocation.
    P1,
    /// Dual-timescale spectrum and time allocation.
    P2,
    /// Dual timescale with flexible user association.
    P3,
    FullReuse,
    Conservative,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::P1, Method::P2, Method::P3, Method::FullReuse, Method::Conservative];

    pub fn name(self) -> &'static str {
        match self {
            Method::P1 => "p1",
            Method::P2 => "p2",
            Method::P3 => "p3",
            Method::FullReuse => "full-reuse",
            Method::Conservative => "conservative",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected p1, p2, p3, full-reuse or conservative)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocatorOptions {
    pub fixed_point: FixedPointOptions,
    /// L∞ change of the monitored allocation block that ends the outer loop.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Initial utilizations are `1 - delta`.
    pub delta: f64,
    pub solver: SolverOptions,
    /// Starting points tried by the dual-timescale loops; the lowest
    /// objective wins.
    pub starts: Vec<Start>,
}

/// Starting point of a dual-timescale loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// Continue from the converged slow-timescale loop (`z_N = 1`).
    SlowTimescale,
    /// Equal time slots for each single-AP pattern, all-busy utilizations.
    SingleSlots,
    /// Equal time on every nonempty pattern, all-busy utilizations.
    UniformTime,
    /// Continue from the full-reuse allocation at its own operating point.
    FullReuse,
}

impl Start {
    pub const ALL: [Start; 4] = [Start::SlowTimescale, Start::SingleSlots, Start::UniformTime, Start::FullReuse];
}

/// Time fractions with everything on the full pattern.
fn z_full(n: usize) -> Vec<f64> {
    let np = pattern_count(n);
    let mut z = vec![0.0; np];
    z[np - 1] = 1.0;
    z
}

fn z_single_slots(n: usize) -> Vec<f64> {
    let mut z = vec![0.0; pattern_count(n)];
    (0..n).for_each(|i| z[Pattern::singleton(i).index()] = 1.0 / n as f64);
    z
}

/// Equal weight on every nonempty pattern.
fn uniform_nonempty(n: usize) -> Vec<f64> {
    let np = pattern_count(n);
    let mut z = vec![1.0 / (np - 1) as f64; np];
    z[0] = 0.0;
    z
}

impl Default for AllocatorOptions {
    fn default() -> Self {
        AllocatorOptions {
            fixed_point: FixedPointOptions::default(),
            outer_tol: 1e-4,
            max_outer: 200,
            delta: 1e-3,
            solver: SolverOptions::default(),
            starts: Start::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub rho: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    /// `Σ λ d` at the new allocation and utilizations.
    pub objective: f64,
    pub statuses: Vec<SolveStatus>,
    /// Largest `load / cap` reported by each block solve.
    pub max_ratios: Vec<f64>,
    /// L∞ change of the monitored block.
    pub change: f64,
    pub fixed_point_iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Starting point of the winning run (dual-timescale loops).
    pub start: Option<Start>,
    /// Starts abandoned because a block was infeasible or the starting
    /// allocation unstable.
    pub dropped_starts: Vec<String>,
    /// Departures from the expected monotone behavior, logged rather than fatal.
    pub anomalies: Vec<String>,
}

impl SolveTrace {
    pub fn outer_iterations(&self) -> usize {
        self.records.len()
    }

    fn anomaly(&mut self, msg: String) {
        log::warn!("{msg}");
        self.anomalies.push(msg);
    }
}

/// Allocation with its analytic operating point.
#[derive(Clone, Debug)]
pub struct Solution {
    pub method: Method,
    pub allocation: Allocation,
    pub state: UtilState,
    /// Per-queue rates (per AP under fixed association, per UE group otherwise).
    pub rates: RateTable,
    pub delays: Vec<f64>,
    /// `Σ λ d`.
    pub objective: f64,
    pub report: DelayReport,
    pub trace: SolveTrace,
}

impl Solution {
    pub fn max_util(&self) -> f64 {
        self.state.max_util()
    }
}

/// Runs one method on a scenario.
pub fn solve(method: Method, scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    match method {
        Method::P1 => solve_p1(scenario, opts),
        Method::P2 => solve_p2(scenario, opts),
        Method::P3 => solve_p3(scenario, opts),
        Method::FullReuse => baseline_full_reuse(scenario, opts),
        Method::Conservative => baseline_conservative(scenario, opts),
    }
}

pub fn solve_p1(scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    FixedLoop::new(scenario, opts)?.run(Method::P1, false, opts.max_outer)
}

/// Runs the dual-timescale loop from each configured start and keeps the
/// lowest objective. Starts that continue from another allocation also offer
/// that allocation itself, so the result is never worse than [`solve_p1`] or
/// a stable full reuse.
pub fn solve_p2(scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    let lp = FixedLoop::new(scenario, opts)?;
    let n = scenario.n_aps();
    let fresh = |z: Vec<f64>| FixedInit { y: uniform_nonempty(n), z, rho: vec![1.0 - opts.delta; n] };
    let from = |sol: &Solution| FixedInit {
        y: sol.allocation.y.clone(),
        z: sol.allocation.z.clone(),
        rho: sol.state.rho.clone(),
    };
    best_of_starts(Method::P2, &opts.starts, |start| {
        Ok(match start {
            Start::SlowTimescale => {
                let p1 = lp.run(Method::P1, false, opts.max_outer)?;
                let cont = lp.run_from(Method::P2, true, opts.max_outer, from(&p1))?;
                vec![p1, cont]
            }
            Start::SingleSlots => vec![lp.run_from(Method::P2, true, opts.max_outer, fresh(z_single_slots(n)))?],
            Start::UniformTime => vec![lp.run_from(Method::P2, true, opts.max_outer, fresh(uniform_nonempty(n)))?],
            Start::FullReuse => {
                let fr = baseline_full_reuse(scenario, opts)?;
                let cont = lp.run_from(Method::P2, true, opts.max_outer, from(&fr))?;
                vec![fr, cont]
            }
        })
    })
}

/// Flexible-association counterpart of [`solve_p2`], with the same starts.
pub fn solve_p3(scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    let lp = FlexLoop::new(scenario, opts)?;
    let n = scenario.n_aps();
    // Full reuse on a fixed-association scenario comes back in per-AP form.
    let from = |sol: &Solution| -> FlexInit {
        let (x, sigma) = match (&sol.allocation.x, &sol.state.sigma, &scenario.association) {
            (Some(x), Some(sigma), _) => (x.clone(), sigma.clone()),
            (_, _, Association::Fixed { ap_of_group, group_of_ap }) => (
                sol.allocation.clone().with_fixed_split(group_of_ap).x.unwrap_or_default(),
                ap_of_group.iter().map(|&i| sol.state.rho[i]).collect(),
            ),
            _ => unreachable!("flexible solutions carry x and sigma"),
        };
        FlexInit { u: [sol.allocation.y.as_slice(), &x].concat(), z: sol.allocation.z.clone(), sigma, rho: sol.state.rho.clone() }
    };
    best_of_starts(Method::P3, &opts.starts, |start| {
        Ok(match start {
            Start::SlowTimescale => {
                let slow = lp.run(Method::P3, false, opts.max_outer, lp.fresh(z_full(n)))?;
                let cont = lp.run(Method::P3, true, opts.max_outer, from(&slow))?;
                vec![slow, cont]
            }
            Start::SingleSlots => vec![lp.run(Method::P3, true, opts.max_outer, lp.fresh(z_single_slots(n)))?],
            Start::UniformTime => vec![lp.run(Method::P3, true, opts.max_outer, lp.fresh(uniform_nonempty(n)))?],
            Start::FullReuse => {
                let fr = baseline_full_reuse(scenario, opts)?;
                let cont = lp.run(Method::P3, true, opts.max_outer, from(&fr))?;
                vec![fr, cont]
            }
        })
    })
}

/// Lowest-objective candidate over all starts. A start that hits an
/// infeasible block, an unstable starting allocation or a queue left without
/// service is dropped.
fn best_of_starts(
    method: Method,
    starts: &[Start],
    mut run: impl FnMut(Start) -> Result<Vec<Solution>>,
) -> Result<Solution> {
    let mut best: Option<Solution> = None;
    let mut dropped = Vec::new();
    for &start in starts {
        let candidates = match run(start) {
            Ok(c) => c,
            Err(e @ (Error::Infeasible(_) | Error::UnstableQueue { .. } | Error::ZeroServiceRate { .. })) => {
                log::info!("{method}: start {start:?} dropped: {e}");
                dropped.push(format!("{start:?}: {e}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        for mut sol in candidates {
            log::debug!("{method}: start {start:?} gives objective {}", sol.objective);
            if best.as_ref().is_none_or(|b| sol.objective < b.objective) {
                sol.method = method;
                sol.trace.start = Some(start);
                best = Some(sol);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::Infeasible(format!("{method}: no start is feasible ({})", dropped.join("; "))))?;
    best.trace.dropped_starts = dropped;
    Ok(best)
}

/// The first outer iterate of the slow-timescale loop: spectrum allocated
/// against all-busy interference. Under flexible association the first
/// iterate of the flexible loop.
pub fn baseline_conservative(scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    let mut sol = match scenario.association {
        Association::Fixed { .. } => FixedLoop::new(scenario, opts)?.run(Method::Conservative, false, 1)?,
        Association::Flexible => {
            let lp = FlexLoop::new(scenario, opts)?;
            lp.run(Method::Conservative, false, 1, lp.fresh(z_full(scenario.n_aps())))?
        }
    };
    sol.trace.converged = true;
    Ok(sol)
}

/// `y_N = z_N = 1`. Under flexible association each AP splits its spectrum
/// over the groups it hears best, in proportion to their loads.
pub fn baseline_full_reuse(scenario: &Scenario, opts: &AllocatorOptions) -> Result<Solution> {
    let n = scenario.n_aps();
    let k = scenario.n_groups();
    let mut alloc = Allocation::full_reuse(n, k);
    if !scenario.association.is_fixed() {
        let mut x = vec![0.0; n * k * pattern_count(n)];
        let full = Pattern::full(n);
        let best_ap: Vec<usize> = (0..k)
            .map(|j| {
                (0..n)
                    .max_by(|&a, &b| {
                        let ga = scenario.aps[a].psd * scenario.link_gain(a, j).unwrap_or(0.0);
                        let gb = scenario.aps[b].psd * scenario.link_gain(b, j).unwrap_or(0.0);
                        ga.total_cmp(&gb).then(b.cmp(&a))
                    })
                    .unwrap_or(0)
            })
            .collect();
        for i in 0..n {
            let mine: Vec<usize> = (0..k).filter(|&j| best_ap[j] == i).collect();
            let load: f64 = mine.iter().map(|&j| scenario.groups[j].lambda).sum();
            if load > 0.0 {
                for &j in &mine {
                    x[x_index(n, k, i, j, full)] = scenario.groups[j].lambda / load;
                }
            } else {
                for j in 0..k {
                    x[x_index(n, k, i, j, full)] = 1.0 / k as f64;
                }
            }
        }
        alloc.x = Some(x);
    }
    let mut sol = evaluate_allocation(scenario, &alloc, opts)?;
    sol.method = Method::FullReuse;
    Ok(sol)
}

/// Analytic operating point of an arbitrary allocation: the largest
/// utilization fixed point, reached by iterating from full utilization.
pub fn evaluate_allocation(scenario: &Scenario, alloc: &Allocation, opts: &AllocatorOptions) -> Result<Solution> {
    alloc.validate(scenario)?;
    let kernel = Kernel::new(scenario)?;
    let lambda = scenario.lambdas();
    let (state, rates, delays) = match scenario.association {
        Association::Fixed { ref group_of_ap, .. } => {
            let ap_lambda: Vec<f64> = group_of_ap.iter().map(|&j| lambda[j]).collect();
            let rates = queueing::rates_dual(&alloc.y, &alloc.z, &kernel);
            let fp = queueing::fixed_point_rho_from_top(&rates, &ap_lambda, &opts.fixed_point)?;
            check_stable(&fp.util, &ap_lambda)?;
            let delays = queueing::delays_fixed(&fp.util, &rates, &ap_lambda)?;
            (UtilState::from_rho(fp.util), rates, delays)
        }
        Association::Flexible => {
            let x = alloc
                .x
                .as_deref()
                .ok_or_else(|| Error::InvalidAllocation("flexible association needs x".into()))?;
            let rates = queueing::rates_flex(x, &alloc.z, &kernel);
            let sys = FlexSystem { n: scenario.n_aps(), x, y: &alloc.y, rates: &rates, lambda: &lambda };
            let fp = queueing::fixed_point_sigma_from_top(&sys, &opts.fixed_point)?;
            check_stable(&fp.util, &lambda)?;
            let rho = sys.rho(&fp.util);
            let delays = queueing::delays_flex(&fp.util, &rho, &rates, &lambda)?;
            (UtilState::from_sigma(fp.util, rho), rates, delays)
        }
    };
    let queue_lambda = queue_lambdas(scenario);
    let objective = queueing::network_objective(&queue_lambda, &delays);
    Ok(Solution {
        method: Method::FullReuse,
        allocation: alloc.clone(),
        report: DelayReport::analytic(&queue_lambda, &delays),
        state,
        rates,
        delays,
        objective,
        trace: SolveTrace { converged: true, ..Default::default() },
    })
}

/// Arrival rate per queue: per AP under fixed association, per group otherwise.
pub fn queue_lambdas(scenario: &Scenario) -> Vec<f64> {
    scenario.ap_lambdas().unwrap_or_else(|_| scenario.lambdas())
}

fn check_stable(util: &[f64], lambda: &[f64]) -> Result<()> {
    for (q, (&u, &l)) in util.iter().zip(lambda).enumerate() {
        if l > 0.0 && u >= 1.0 - 1e-12 {
            return Err(Error::UnstableQueue { queue: q, rho: u });
        }
    }
    Ok(())
}

fn sup_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn require_feasible(res: &convex::SolveResult, block: &str, outer: usize) -> Result<()> {
    if res.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible(format!(
            "{block} subproblem at outer iteration {} has no feasible point (best load ratio {:.6})",
            outer + 1,
            res.max_ratio
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subproblem construction, fixed association

/// Entries `(i, A ∋ i)` for every loaded AP with weight and constraint
/// coefficient `λ_i p_A / ρ_i`.
fn fixed_entries(rho: &[f64], lambda: &[f64]) -> (Vec<QueueSpec>, Vec<EntrySpec>, Vec<(usize, Pattern)>) {
    let n = rho.len();
    let mut queues = Vec::with_capacity(n);
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for i in 0..n {
        let loaded = lambda[i] > 0.0;
        queues.push(QueueSpec {
            curvature: lambda[i] / (1.0 - rho[i]),
            cap: loaded.then_some(rho[i]),
        });
        if !loaded {
            continue;
        }
        let w = conditional_weights(rho, i);
        for a in Pattern::all(n).filter(|a| a.contains(i)) {
            let wa = lambda[i] * w[a.index()];
            if wa > 0.0 {
                entries.push(EntrySpec { queue: i, weight: wa, cons: wa });
                sets.push((i, a));
            }
        }
    }
    (queues, entries, sets)
}

fn columns_from(m: &Collapsed, sets: &[(usize, Pattern)], offset: usize, dim: usize) -> Vec<Vec<(u32, f64)>> {
    let mut cols = vec![Vec::new(); dim];
    for (e, &(q, set)) in sets.iter().enumerate() {
        for c in 0..m.columns() {
            let v = m.get(q, c, set);
            if v > 0.0 {
                cols[offset + c].push((e as u32, v));
            }
        }
    }
    cols
}

/// Spectrum block under fixed association, time fractions frozen.
pub fn fixed_spec_y(kernel: &Kernel, rho: &[f64], lambda: &[f64], z: &[f64]) -> SubproblemSpec {
    let np = pattern_count(kernel.n_aps());
    let (queues, entries, sets) = fixed_entries(rho, lambda);
    let columns = columns_from(&kernel.collapse_over_time(z), &sets, 0, np);
    SubproblemSpec { queues, entries, columns, polytope: Polytope::Simplex { dim: np } }
}

/// Time block under fixed association, spectrum frozen.
pub fn fixed_spec_z(kernel: &Kernel, rho: &[f64], lambda: &[f64], y: &[f64]) -> SubproblemSpec {
    let np = pattern_count(kernel.n_aps());
    let (queues, entries, sets) = fixed_entries(rho, lambda);
    let columns = columns_from(&kernel.collapse_over_freq(y), &sets, 0, np);
    SubproblemSpec { queues, entries, columns, polytope: Polytope::Simplex { dim: np } }
}

struct FixedInit {
    y: Vec<f64>,
    z: Vec<f64>,
    rho: Vec<f64>,
}

struct FixedLoop<'a> {
    scenario: &'a Scenario,
    opts: &'a AllocatorOptions,
    kernel: Kernel,
    lambda: Vec<f64>,
}

impl<'a> FixedLoop<'a> {
    fn new(scenario: &'a Scenario, opts: &'a AllocatorOptions) -> Result<Self> {
        let lambda = scenario.ap_lambdas()?;
        let n = scenario.n_aps();
        if n > MAX_APS_FIXED {
            return Err(Error::PatternSpaceTooLarge { n, limit: MAX_APS_FIXED });
        }
        Ok(FixedLoop { scenario, opts, kernel: Kernel::new(scenario)?, lambda })
    }

    fn objective(&self, rho: &[f64], rates: &RateTable) -> Result<(Vec<f64>, f64)> {
        let delays = queueing::delays_fixed(rho, rates, &self.lambda)?;
        let obj = queueing::network_objective(&self.lambda, &delays);
        Ok((delays, obj))
    }

    fn run(&self, method: Method, dual: bool, max_outer: usize) -> Result<Solution> {
        let n = self.scenario.n_aps();
        let init = FixedInit { y: uniform_nonempty(n), z: z_full(n), rho: vec![1.0 - self.opts.delta; n] };
        self.run_from(method, dual, max_outer, init)
    }

    fn run_from(&self, method: Method, dual: bool, max_outer: usize, init: FixedInit) -> Result<Solution> {
        let n = self.scenario.n_aps();
        let sopts = &self.opts.solver;
        let FixedInit { mut y, mut z, mut rho } = init;
        let mut trace = SolveTrace::default();
        let mut rates = queueing::rates_dual(&y, &z, &self.kernel);
        for outer in 0..max_outer {
            let spec = fixed_spec_y(&self.kernel, &rho, &self.lambda, &z);
            let ry = convex::solve(&spec, Some(&y), sopts);
            require_feasible(&ry, "spectrum", outer)?;
            let y_new = ry.u.clone();
            let mut statuses = vec![ry.status];
            let mut ratios = vec![ry.max_ratio];
            if dual {
                let spec = fixed_spec_z(&self.kernel, &rho, &self.lambda, &y_new);
                let rz = convex::solve(&spec, Some(&z), sopts);
                require_feasible(&rz, "time", outer)?;
                statuses.push(rz.status);
                ratios.push(rz.max_ratio);
                z = rz.u;
            }
            rates = queueing::rates_dual(&y_new, &z, &self.kernel);
            let fp = self.fixed_point(&rho, &rates, outer, &mut trace)?;
            for (i, (&new, &old)) in fp.util.iter().zip(&rho).enumerate() {
                if new > old + 1e-9 {
                    trace.anomaly(format!("outer iteration {}: utilization of AP {i} rose from {old} to {new}", outer + 1));
                }
            }
            rho = fp.util;
            let (_, obj) = self.objective(&rho, &rates)?;
            let change = sup_change(&y_new, &y);
            if let Some(prev) = trace.records.last() {
                if obj > prev.objective * (1.0 + 1e-7) + 1e-12 {
                    trace.anomaly(format!(
                        "outer iteration {}: objective rose from {} to {obj}",
                        outer + 1,
                        prev.objective
                    ));
                }
            }
            trace.records.push(IterationRecord {
                rho: rho.clone(),
                sigma: None,
                objective: obj,
                statuses,
                max_ratios: ratios,
                change,
                fixed_point_iterations: fp.iterations,
            });
            y = y_new;
            if change < self.opts.outer_tol {
                trace.converged = true;
                break;
            }
        }
        if !trace.converged && max_outer == self.opts.max_outer {
            log::warn!("{method}: no convergence within {max_outer} outer iterations");
        }
        let (delays, objective) = self.objective(&rho, &rates)?;
        let alloc = Allocation { n, k: n, y, z, x: None };
        Ok(Solution {
            method,
            report: DelayReport::analytic(&self.lambda, &delays),
            allocation: alloc,
            state: UtilState::from_rho(rho),
            rates,
            delays,
            objective,
            trace,
        })
    }

    fn fixed_point(&self, rho: &[f64], rates: &RateTable, outer: usize, trace: &mut SolveTrace) -> Result<FixedPoint> {
        match queueing::fixed_point_rho(rho, rates, &self.lambda, &self.opts.fixed_point) {
            Err(Error::NonContractiveStart { index, start, image }) => {
                trace.anomaly(format!(
                    "outer iteration {}: fixed-point start not contractive at AP {index} ({start} < {image}); restarting from full utilization",
                    outer + 1
                ));
                queueing::fixed_point_rho_from_top(rates, &self.lambda, &self.opts.fixed_point)
            }
            other => other,
        }
    }
}

// ---------------------------------------------------------------------------
// Flexible association

/// Entries `(j, I)` for every loaded group with weight and constraint
/// coefficient `λ_j p_I`.
fn flex_entries(sigma: &[f64], p: &[f64], lambda: &[f64]) -> (Vec<QueueSpec>, Vec<EntrySpec>, Vec<(usize, Pattern)>) {
    let mut queues = Vec::with_capacity(sigma.len());
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for (j, (&s, &l)) in sigma.iter().zip(lambda).enumerate() {
        let loaded = l > 0.0;
        queues.push(QueueSpec { curvature: l / (1.0 - s), cap: loaded.then_some(s) });
        if !loaded {
            continue;
        }
        for (a, &pa) in p.iter().enumerate() {
            let w = l * pa;
            if w > 0.0 {
                entries.push(EntrySpec { queue: j, weight: w, cons: w });
                sets.push((j, Pattern::from_bits(a as u32)));
            }
        }
    }
    (queues, entries, sets)
}

/// `(x, y)` block under flexible association, time fractions frozen.
pub fn flex_spec_xy(
    kernel: &Kernel,
    sigma: &[f64],
    rho: &[f64],
    lambda: &[f64],
    z: &[f64],
    links: Option<Vec<bool>>,
) -> SubproblemSpec {
    let n = kernel.n_aps();
    let k = kernel.n_groups();
    let np = pattern_count(n);
    let (queues, entries, sets) = flex_entries(sigma, &busy_probs(rho), lambda);
    let m = kernel.collapse_over_time_flex(z);
    let polytope = Polytope::CoupledXY { n, k, links };
    let mut columns = vec![Vec::new(); polytope.dim()];
    for (e, &(j, set)) in sets.iter().enumerate() {
        for i in 0..n {
            for f in Pattern::all(n).filter(|f| f.contains(i)) {
                let v = m.get(j, i * np + f.index(), set);
                if v > 0.0 {
                    columns[np + x_index(n, k, i, j, f)].push((e as u32, v));
                }
            }
        }
    }
    SubproblemSpec { queues, entries, columns, polytope }
}

/// Time block under flexible association, `x` frozen.
pub fn flex_spec_z(kernel: &Kernel, sigma: &[f64], rho: &[f64], lambda: &[f64], x: &[f64]) -> SubproblemSpec {
    let np = pattern_count(kernel.n_aps());
    let (queues, entries, sets) = flex_entries(sigma, &busy_probs(rho), lambda);
    let columns = columns_from(&kernel.collapse_over_freq_flex(x), &sets, 0, np);
    SubproblemSpec { queues, entries, columns, polytope: Polytope::Simplex { dim: np } }
}

struct FlexInit {
    /// `[y | x]`.
    u: Vec<f64>,
    z: Vec<f64>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
}

struct FlexLoop<'a> {
    scenario: &'a Scenario,
    opts: &'a AllocatorOptions,
    kernel: Kernel,
    lambda: Vec<f64>,
    /// Under fixed association, AP `i` may only serve its own group.
    links: Option<Vec<bool>>,
}

impl<'a> FlexLoop<'a> {
    fn new(scenario: &'a Scenario, opts: &'a AllocatorOptions) -> Result<Self> {
        let n = scenario.n_aps();
        let k = scenario.n_groups();
        if n > MAX_APS_FLEX {
            return Err(Error::PatternSpaceTooLarge { n, limit: MAX_APS_FLEX });
        }
        if k > MAX_GROUPS_FLEX {
            return Err(Error::InvalidScenario(format!(
                "{k} UE groups exceeds the limit of {MAX_GROUPS_FLEX} for flexible association"
            )));
        }
        let links = scenario.group_of_ap().map(|g| {
            let mut l = vec![false; n * k];
            for (i, &j) in g.iter().enumerate() {
                l[i * k + j] = true;
            }
            l
        });
        Ok(FlexLoop { scenario, opts, kernel: Kernel::new(scenario)?, lambda: scenario.lambdas(), links })
    }

    /// Interior spectrum and association, all-busy utilizations.
    fn fresh(&self, z: Vec<f64>) -> FlexInit {
        let polytope = Polytope::CoupledXY { n: self.scenario.n_aps(), k: self.scenario.n_groups(), links: self.links.clone() };
        FlexInit {
            u: polytope.interior(),
            z,
            sigma: vec![1.0 - self.opts.delta; self.scenario.n_groups()],
            rho: vec![1.0 - self.opts.delta; self.scenario.n_aps()],
        }
    }

    fn run(&self, method: Method, dual: bool, max_outer: usize, init: FlexInit) -> Result<Solution> {
        let n = self.scenario.n_aps();
        let np = pattern_count(n);
        let sopts = &self.opts.solver;
        let FlexInit { mut u, mut z, mut sigma, mut rho } = init;
        let mut trace = SolveTrace::default();
        let mut rates = queueing::rates_flex(&u[np..], &z, &self.kernel);
        for outer in 0..max_outer {
            let spec = flex_spec_xy(&self.kernel, &sigma, &rho, &self.lambda, &z, self.links.clone());
            let rxy = convex::solve(&spec, Some(&u), sopts);
            require_feasible(&rxy, "spectrum/association", outer)?;
            let u_new = rxy.u.clone();
            let mut statuses = vec![rxy.status];
            let mut ratios = vec![rxy.max_ratio];
            if dual {
                let spec = flex_spec_z(&self.kernel, &sigma, &rho, &self.lambda, &u_new[np..]);
                let rz = convex::solve(&spec, Some(&z), sopts);
                require_feasible(&rz, "time", outer)?;
                statuses.push(rz.status);
                ratios.push(rz.max_ratio);
                z = rz.u;
            }
            let (y_new, x_new) = u_new.split_at(np);
            rates = queueing::rates_flex(x_new, &z, &self.kernel);
            let sys = FlexSystem { n, x: x_new, y: y_new, rates: &rates, lambda: &self.lambda };
            let fp = match queueing::fixed_point_sigma(&sigma, &sys, &self.opts.fixed_point) {
                Err(Error::NonContractiveStart { index, start, image }) => {
                    trace.anomaly(format!(
                        "outer iteration {}: fixed-point start not contractive at group {index} ({start} < {image}); restarting from full utilization",
                        outer + 1
                    ));
                    queueing::fixed_point_sigma_from_top(&sys, &self.opts.fixed_point)?
                }
                other => other?,
            };
            for (j, (&new, &old)) in fp.util.iter().zip(&sigma).enumerate() {
                if new > old + 1e-9 {
                    trace.anomaly(format!("outer iteration {}: utilization of group {j} rose from {old} to {new}", outer + 1));
                }
            }
            sigma = fp.util;
            rho = sys.rho(&sigma);
            let delays = queueing::delays_flex(&sigma, &rho, &rates, &self.lambda)?;
            let obj = queueing::network_objective(&self.lambda, &delays);
            let change = sup_change(x_new, &u[np..]);
            if let Some(prev) = trace.records.last() {
                if obj > prev.objective * (1.0 + 1e-7) + 1e-12 {
                    trace.anomaly(format!(
                        "outer iteration {}: objective rose from {} to {obj}",
                        outer + 1,
                        prev.objective
                    ));
                }
            }
            trace.records.push(IterationRecord {
                rho: rho.clone(),
                sigma: Some(sigma.clone()),
                objective: obj,
                statuses,
                max_ratios: ratios,
                change,
                fixed_point_iterations: fp.iterations,
            });
            u = u_new;
            if change < self.opts.outer_tol {
                trace.converged = true;
                break;
            }
        }
        if !trace.converged && max_outer == self.opts.max_outer {
            log::warn!("{method}: no convergence within {max_outer} outer iterations");
        }
        let delays = queueing::delays_flex(&sigma, &rho, &rates, &self.lambda)?;
        let objective = queueing::network_objective(&self.lambda, &delays);
        let (y, x) = u.split_at(np);
        let alloc = Allocation { n, k: self.scenario.n_groups(), y: y.to_vec(), z, x: Some(x.to_vec()) };
        Ok(Solution {
            method,
            report: DelayReport::analytic(&self.lambda, &delays),
            allocation: alloc,
            state: UtilState::from_sigma(sigma, rho),
            rates,
            delays,
            objective,
            trace,
        })
    }
}
