//! Convex subproblem solver.
//!
//! Every block subproblem has the same shape: a decision vector `u` in a
//! polytope, service rates that are linear in `u` (one rate per *entry*, an
//! entry being a (queue, busy set) pair), the objective
//! `Σ_e w_e (a_q / r_e² + 1/r_e)` and one utilization inequality per queue,
//! `Σ_{e∈q} c_e / r_e ≤ cap_q`.
//!
//! The solver runs pairwise Frank-Wolfe over the polytope's vertices with an
//! exact line search, first on a smoothed max of the constraint ratios (phase
//! one) and then on the objective plus a log barrier whose weight shrinks in
//! stages.

use std::collections::HashMap;

use crate::allocation::x_index;
use crate::pattern::{pattern_count, Pattern};

#[derive(Clone, Debug, PartialEq)]
pub struct QueueSpec {
    /// `a_q` in `a_q / r²`.
    pub curvature: f64,
    /// Right-hand side of the utilization inequality; `None` leaves the queue
    /// unconstrained.
    pub cap: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntrySpec {
    pub queue: usize,
    /// Objective weight `w_e`.
    pub weight: f64,
    /// Constraint coefficient `c_e`.
    pub cons: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Polytope {
    /// Probability simplex over `dim` coordinates.
    Simplex { dim: usize },
    /// `u = [y | x]` with `y` a distribution over the `2^n` patterns and
    /// `Σ_j x^{i->j}_F = y_F` for `i ∈ F`, `x^{i->j}_F = 0` for `i ∉ F`.
    /// The `x` block follows [`x_index`]. The oracle never returns the empty
    /// pattern, which carries no traffic. `links[i * k + j]`, when given,
    /// restricts which groups AP `i` may serve.
    CoupledXY {
        n: usize,
        k: usize,
        links: Option<Vec<bool>>,
    },
}

impl Polytope {
    pub fn coupled(n: usize, k: usize) -> Self {
        Polytope::CoupledXY { n, k, links: None }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Polytope::Simplex { dim } => dim,
            Polytope::CoupledXY { n, k, .. } => pattern_count(n) * (1 + n * k),
        }
    }

    fn link_ok(links: &Option<Vec<bool>>, k: usize, i: usize, j: usize) -> bool {
        links.as_ref().is_none_or(|l| l[i * k + j])
    }

    /// Patterns whose every member may serve at least one group.
    fn pattern_usable(links: &Option<Vec<bool>>, k: usize, f: Pattern) -> bool {
        !f.is_empty() && f.members().all(|i| (0..k).any(|j| Self::link_ok(links, k, i, j)))
    }

    /// Vertex minimizing `<g, v>`; ties go to the lowest index.
    pub fn lmo(&self, g: &[f64]) -> Vertex {
        match *self {
            Polytope::Simplex { dim } => {
                let mut best = 0;
                for c in 1..dim {
                    if g[c] < g[best] {
                        best = c;
                    }
                }
                vec![best as u32]
            }
            Polytope::CoupledXY { n, k, ref links } => {
                let np = pattern_count(n);
                let mut best: Option<(f64, Vertex)> = None;
                for f in Pattern::all(n).filter(|&f| Self::pattern_usable(links, k, f)) {
                    let mut score = g[f.index()];
                    let mut v = vec![f.index() as u32];
                    for i in f.members() {
                        let mut bj = usize::MAX;
                        let mut bg = f64::INFINITY;
                        for j in (0..k).filter(|&j| Self::link_ok(links, k, i, j)) {
                            let gj = g[np + x_index(n, k, i, j, f)];
                            if bj == usize::MAX || gj < bg {
                                bg = gj;
                                bj = j;
                            }
                        }
                        score += bg;
                        v.push((np + x_index(n, k, i, bj, f)) as u32);
                    }
                    if best.as_ref().is_none_or(|(s, _)| score < *s) {
                        best = Some((score, v));
                    }
                }
                best.expect("at least one pattern").1
            }
        }
    }

    /// Writes `u` as a convex combination of vertices.
    pub fn decompose(&self, u: &[f64]) -> Vec<(Vertex, f64)> {
        match *self {
            Polytope::Simplex { .. } => u
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(c, &v)| (vec![c as u32], v))
                .collect(),
            Polytope::CoupledXY { n, k, .. } => {
                let np = pattern_count(n);
                let mut out = Vec::new();
                for f in Pattern::all(n) {
                    let yf = u[f.index()];
                    if yf <= 0.0 {
                        continue;
                    }
                    // Per member AP: remaining mass per group, rescaled to sum to yf.
                    let mut queues: Vec<Vec<(usize, f64)>> = f
                        .members()
                        .map(|i| {
                            let mut row: Vec<(usize, f64)> = (0..k)
                                .map(|j| (j, u[np + x_index(n, k, i, j, f)]))
                                .filter(|&(_, v)| v > 0.0)
                                .collect();
                            let s: f64 = row.iter().map(|e| e.1).sum();
                            if s > 0.0 {
                                row.iter_mut().for_each(|e| e.1 *= yf / s);
                            } else {
                                row = vec![(0, yf)];
                            }
                            row
                        })
                        .collect();
                    let members: Vec<usize> = f.members().collect();
                    let mut ptr = vec![0usize; members.len()];
                    let mut left = yf;
                    while left > 1e-15 * yf {
                        let mut theta = left;
                        for (m, q) in queues.iter().enumerate() {
                            if let Some(e) = q.get(ptr[m]) {
                                theta = theta.min(e.1);
                            }
                        }
                        let mut v = vec![f.index() as u32];
                        for (m, q) in queues.iter_mut().enumerate() {
                            let p = ptr[m].min(q.len() - 1);
                            v.push((np + x_index(n, k, members[m], q[p].0, f)) as u32);
                            q[p].1 -= theta;
                            if q[p].1 <= 1e-15 * yf && ptr[m] + 1 < q.len() {
                                ptr[m] += 1;
                            }
                        }
                        out.push((v, theta));
                        left -= theta;
                        if theta <= 0.0 {
                            break;
                        }
                    }
                }
                out
            }
        }
    }

    /// A point with every pattern in use: uniform `y` over nonempty patterns,
    /// each AP's share split evenly over groups.
    pub fn interior(&self) -> Vec<f64> {
        match *self {
            Polytope::Simplex { dim } => vec![1.0 / dim as f64; dim],
            Polytope::CoupledXY { n, k, ref links } => {
                let np = pattern_count(n);
                let mut u = vec![0.0; self.dim()];
                let usable: Vec<Pattern> =
                    Pattern::all(n).filter(|&f| Self::pattern_usable(links, k, f)).collect();
                let yf = 1.0 / usable.len().max(1) as f64;
                for &f in &usable {
                    u[f.index()] = yf;
                    for i in f.members() {
                        let groups: Vec<usize> =
                            (0..k).filter(|&j| Self::link_ok(links, k, i, j)).collect();
                        for &j in &groups {
                            u[np + x_index(n, k, i, j, f)] = yf / groups.len() as f64;
                        }
                    }
                }
                if usable.is_empty() {
                    u[0] = 1.0;
                }
                u
            }
        }
    }
}

/// A polytope vertex, given by the coordinates that equal one.
pub type Vertex = Vec<u32>;

#[derive(Clone, Debug, PartialEq)]
pub struct SubproblemSpec {
    pub queues: Vec<QueueSpec>,
    pub entries: Vec<EntrySpec>,
    /// `columns[c]` lists `(entry, coefficient)`: `r_e = Σ_c coef · u_c`.
    pub columns: Vec<Vec<(u32, f64)>>,
    pub polytope: Polytope,
}

impl SubproblemSpec {
    pub fn rates(&self, u: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.entries.len()];
        for (c, col) in self.columns.iter().enumerate() {
            if u[c] != 0.0 {
                for &(e, coef) in col {
                    r[e as usize] += coef * u[c];
                }
            }
        }
        r
    }

    fn vertex_rates(&self, v: &[u32]) -> Vec<f64> {
        let mut r = vec![0.0; self.entries.len()];
        for &c in v {
            for &(e, coef) in &self.columns[c as usize] {
                r[e as usize] += coef;
            }
        }
        r
    }

    /// `Σ_{e∈q} c_e / r_e` per queue (infinite when a needed rate is zero).
    pub fn loads(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.queues.len()];
        for (e, ent) in self.entries.iter().enumerate() {
            if ent.cons > 0.0 {
                g[ent.queue] += if r[e] > 0.0 { ent.cons / r[e] } else { f64::INFINITY };
            }
        }
        g
    }

    /// Largest `load / cap` over constrained queues (0 when there are none).
    pub fn max_ratio(&self, r: &[f64]) -> f64 {
        self.loads(r)
            .iter()
            .zip(&self.queues)
            .filter_map(|(g, q)| q.cap.map(|cap| ratio(*g, cap)))
            .fold(0.0, f64::max)
    }

    /// Objective with rates floored at `r_min`.
    pub fn objective(&self, r: &[f64], r_min: f64) -> f64 {
        self.entries
            .iter()
            .zip(r)
            .map(|(ent, &re)| {
                let re = re.max(r_min);
                ent.weight * (self.queues[ent.queue].curvature / (re * re) + 1.0 / re)
            })
            .sum()
    }

    fn n_constrained(&self) -> usize {
        self.queues.iter().filter(|q| q.cap.is_some()).count()
    }
}

fn ratio(load: f64, cap: f64) -> f64 {
    if load == 0.0 {
        0.0
    } else if cap > 0.0 {
        load / cap
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    /// Relative Frank-Wolfe gap for the final barrier stage.
    pub gap_tol: f64,
    /// Relative gap for the earlier barrier stages.
    pub stage_gap_tol: f64,
    /// Iteration cap per stage.
    pub max_iter: usize,
    /// Barrier weights as multiples of the objective at the phase-one point.
    pub barrier_factors: Vec<f64>,
    pub r_min: f64,
    /// Initial smoothing of the phase-one max.
    pub phase1_tau: f64,
    /// Smallest smoothing tried before giving up on finding an interior point.
    pub phase1_tau_min: f64,
    pub phase1_max_iter: usize,
    /// Interior margin: phase one stops once every ratio is below
    /// `1 - margin`, and treats the feasible set as a single point when the
    /// best achievable ratio provably exceeds `1 - margin`.
    pub phase1_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gap_tol: 1e-6,
            stage_gap_tol: 1e-4,
            max_iter: 50_000,
            barrier_factors: vec![1e-2, 1e-4, 1e-6],
            r_min: 1e-12,
            phase1_tau: 1e-3,
            phase1_tau_min: 1e-5,
            phase1_max_iter: 3_000,
            phase1_margin: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Stalled,
}

impl SolveStatus {
    pub fn is_feasible(self) -> bool {
        self != SolveStatus::Infeasible
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub u: Vec<f64>,
    /// Rate per entry.
    pub rates: Vec<f64>,
    /// Objective without the barrier.
    pub objective: f64,
    /// Frank-Wolfe gap of the last stage.
    pub gap: f64,
    /// Suboptimality the last barrier weight can cause: constrained queues × μ.
    pub barrier_bound: f64,
    pub max_ratio: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Outcome of the phase-one search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhaseOne {
    StrictlyFeasible,
    /// No point with ratios below `1 - phase1_margin` was found; the best
    /// point is feasible but leaves the barrier no room. `proven` when the
    /// duality bound shows no such point exists.
    Boundary { proven: bool },
    Infeasible { lower_bound: f64 },
}

// ---------------------------------------------------------------------------
// Objectives of the rate vector

trait RateObjective {
    /// `None` outside the domain.
    fn value(&self, r: &[f64]) -> Option<f64>;
    /// Gradient with respect to `r`; `false` outside the domain.
    fn grad(&self, r: &[f64], out: &mut [f64]) -> bool;
    /// Hessian with respect to `r`, when available.
    fn hessian(&self, _r: &[f64]) -> Option<RateHessian> {
        None
    }
}

/// `diag(d) + Σ_q coef_q g_q g_qᵀ + c u uᵀ`, where `g_q` lives on queue
/// `q`'s entries and is stored entrywise in `g`.
struct RateHessian {
    diag: Vec<f64>,
    g: Vec<f64>,
    coef: Vec<f64>,
    dense: Option<(f64, Vec<f64>)>,
}

struct Barrier<'a> {
    spec: &'a SubproblemSpec,
    mu: f64,
    r_min: f64,
}

impl Barrier<'_> {
    fn slacks(&self, r: &[f64]) -> Option<Vec<f64>> {
        if r.iter().any(|&re| !(re > self.r_min)) {
            return None;
        }
        let loads = self.spec.loads(r);
        let mut slack = vec![f64::INFINITY; loads.len()];
        if self.mu > 0.0 {
            for (q, (g, qs)) in loads.iter().zip(&self.spec.queues).enumerate() {
                if let Some(cap) = qs.cap {
                    let s = cap - g;
                    if !(s > 0.0) {
                        return None;
                    }
                    slack[q] = s;
                }
            }
        }
        Some(slack)
    }
}

impl RateObjective for Barrier<'_> {
    fn value(&self, r: &[f64]) -> Option<f64> {
        let slack = self.slacks(r)?;
        let mut v = self.spec.objective(r, self.r_min);
        if self.mu > 0.0 {
            v -= self.mu * slack.iter().filter(|s| s.is_finite()).map(|s| s.ln()).sum::<f64>();
        }
        Some(v)
    }

    fn grad(&self, r: &[f64], out: &mut [f64]) -> bool {
        let Some(slack) = self.slacks(r) else {
            return false;
        };
        for (e, ent) in self.spec.entries.iter().enumerate() {
            let inv = 1.0 / r[e];
            let inv2 = inv * inv;
            let a = self.spec.queues[ent.queue].curvature;
            let mut d = -ent.weight * (2.0 * a * inv2 * inv + inv2);
            let s = slack[ent.queue];
            if self.mu > 0.0 && s.is_finite() {
                d -= self.mu * ent.cons * inv2 / s;
            }
            out[e] = d;
        }
        true
    }

    fn hessian(&self, r: &[f64]) -> Option<RateHessian> {
        let slack = self.slacks(r)?;
        let ne = self.spec.entries.len();
        let mut h = RateHessian { diag: vec![0.0; ne], g: vec![0.0; ne], coef: vec![0.0; slack.len()], dense: None };
        for (q, s) in slack.iter().enumerate() {
            if self.mu > 0.0 && s.is_finite() {
                h.coef[q] = self.mu / (s * s);
            }
        }
        for (e, ent) in self.spec.entries.iter().enumerate() {
            let inv = 1.0 / r[e];
            let inv2 = inv * inv;
            let a = self.spec.queues[ent.queue].curvature;
            h.diag[e] = ent.weight * (6.0 * a * inv2 * inv2 + 2.0 * inv2 * inv);
            let s = slack[ent.queue];
            if self.mu > 0.0 && s.is_finite() {
                h.diag[e] += self.mu * 2.0 * ent.cons * inv2 * inv / s;
                h.g[e] = -ent.cons * inv2;
            }
        }
        Some(h)
    }
}

/// `τ log Σ_q exp(G_q / cap_q / τ)` over constrained queues.
struct SmoothMax<'a> {
    spec: &'a SubproblemSpec,
    tau: f64,
    r_min: f64,
}

impl SmoothMax<'_> {
    fn ratios(&self, r: &[f64]) -> Option<Vec<(usize, f64)>> {
        for (e, ent) in self.spec.entries.iter().enumerate() {
            if ent.cons > 0.0 && !(r[e] > self.r_min) {
                return None;
            }
        }
        let loads = self.spec.loads(r);
        Some(
            self.spec
                .queues
                .iter()
                .enumerate()
                .filter_map(|(q, qs)| qs.cap.map(|cap| (q, ratio(loads[q], cap))))
                .collect(),
        )
    }

    fn softmax(&self, ratios: &[(usize, f64)]) -> (f64, Vec<f64>) {
        let top = ratios.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = ratios.iter().map(|&(_, x)| ((x - top) / self.tau).exp()).collect();
        let z: f64 = ws.iter().sum();
        (top + self.tau * z.ln(), ws.into_iter().map(|w| w / z).collect())
    }
}

impl RateObjective for SmoothMax<'_> {
    fn value(&self, r: &[f64]) -> Option<f64> {
        let ratios = self.ratios(r)?;
        if ratios.is_empty() {
            return Some(0.0);
        }
        Some(self.softmax(&ratios).0)
    }

    fn grad(&self, r: &[f64], out: &mut [f64]) -> bool {
        let Some(ratios) = self.ratios(r) else {
            return false;
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        if ratios.is_empty() {
            return true;
        }
        let (_, soft) = self.softmax(&ratios);
        let mut scale = vec![0.0; self.spec.queues.len()];
        for (&(q, _), s) in ratios.iter().zip(soft) {
            scale[q] = s / self.spec.queues[q].cap.unwrap_or(1.0);
        }
        for (e, ent) in self.spec.entries.iter().enumerate() {
            if ent.cons > 0.0 {
                out[e] = -scale[ent.queue] * ent.cons / (r[e] * r[e]);
            }
        }
        true
    }

    fn hessian(&self, r: &[f64]) -> Option<RateHessian> {
        let ratios = self.ratios(r)?;
        let ne = self.spec.entries.len();
        let nq = self.spec.queues.len();
        let mut h = RateHessian { diag: vec![0.0; ne], g: vec![0.0; ne], coef: vec![0.0; nq], dense: None };
        if ratios.is_empty() {
            return Some(h);
        }
        let (_, soft) = self.softmax(&ratios);
        let mut weight = vec![0.0; nq];
        for (&(q, _), s) in ratios.iter().zip(soft) {
            weight[q] = s;
            h.coef[q] = s / self.tau;
        }
        let mut u = vec![0.0; ne];
        for (e, ent) in self.spec.entries.iter().enumerate() {
            let Some(cap) = self.spec.queues[ent.queue].cap else {
                continue;
            };
            if ent.cons > 0.0 {
                let inv = 1.0 / r[e];
                let cap = cap.max(f64::MIN_POSITIVE);
                h.g[e] = -ent.cons * inv * inv / cap;
                h.diag[e] = weight[ent.queue] * 2.0 * ent.cons * inv * inv * inv / cap;
                u[e] = weight[ent.queue] * h.g[e];
            }
        }
        h.dense = Some((-1.0 / self.tau, u));
        Some(h)
    }
}

// ---------------------------------------------------------------------------
// Pairwise Frank-Wolfe

#[derive(Clone)]
struct ActiveSet {
    verts: Vec<Vertex>,
    alpha: Vec<f64>,
    vrates: Vec<Vec<f64>>,
    index: HashMap<Vertex, usize>,
    r: Vec<f64>,
}

impl ActiveSet {
    fn new(spec: &SubproblemSpec, parts: Vec<(Vertex, f64)>) -> Self {
        let mut s = ActiveSet {
            verts: Vec::new(),
            alpha: Vec::new(),
            vrates: Vec::new(),
            index: HashMap::new(),
            r: vec![0.0; spec.entries.len()],
        };
        let total: f64 = parts.iter().map(|p| p.1).sum();
        for (v, a) in parts {
            let idx = s.find_or_add(spec, v);
            s.alpha[idx] += a / total;
        }
        s.refresh_rates();
        s
    }

    fn find_or_add(&mut self, spec: &SubproblemSpec, v: Vertex) -> usize {
        if let Some(&i) = self.index.get(&v) {
            return i;
        }
        let i = self.verts.len();
        self.vrates.push(spec.vertex_rates(&v));
        self.index.insert(v.clone(), i);
        self.verts.push(v);
        self.alpha.push(0.0);
        i
    }

    fn remove(&mut self, i: usize) {
        let last = self.verts.len() - 1;
        self.index.remove(&self.verts[i]);
        self.verts.swap_remove(i);
        self.alpha.swap_remove(i);
        self.vrates.swap_remove(i);
        if i != last {
            self.index.insert(self.verts[i].clone(), i);
        }
    }

    fn refresh_rates(&mut self) {
        self.r.iter_mut().for_each(|x| *x = 0.0);
        for (a, vr) in self.alpha.iter().zip(&self.vrates) {
            for (x, v) in self.r.iter_mut().zip(vr) {
                *x += a * v;
            }
        }
    }

    fn point(&self, dim: usize) -> Vec<f64> {
        let mut u = vec![0.0; dim];
        let total: f64 = self.alpha.iter().sum();
        for (v, a) in self.verts.iter().zip(&self.alpha) {
            for &c in v {
                u[c as usize] += a / total;
            }
        }
        u
    }
}

struct PfwRun {
    iterations: usize,
    gap: f64,
    status: SolveStatus,
}

/// Stop rule evaluated after every gap computation: `Some(true)` stops as
/// converged, `None` continues.
type EarlyStop<'a> = dyn FnMut(&[f64], f64, f64) -> bool + 'a;

fn pfw(
    spec: &SubproblemSpec,
    obj: &dyn RateObjective,
    act: &mut ActiveSet,
    rel_tol: f64,
    max_iter: usize,
    stop: &mut EarlyStop<'_>,
) -> PfwRun {
    let ne = spec.entries.len();
    let dim = spec.columns.len();
    let mut dr = vec![0.0; ne];
    let mut gu = vec![0.0; dim];
    let mut scratch = vec![0.0; ne];
    let mut gap = f64::INFINITY;
    let mut stalls = 0;
    for it in 0..max_iter {
        if it % 64 == 63 {
            act.refresh_rates();
        }
        if !obj.grad(&act.r, &mut dr) {
            act.refresh_rates();
            if !obj.grad(&act.r, &mut dr) {
                return PfwRun { iterations: it, gap, status: SolveStatus::Stalled };
            }
        }
        for (c, col) in spec.columns.iter().enumerate() {
            gu[c] = col.iter().map(|&(e, coef)| coef * dr[e as usize]).sum();
        }
        let s = spec.polytope.lmo(&gu);
        let gs: f64 = s.iter().map(|&c| gu[c as usize]).sum();
        let mut away = 0;
        let mut ga = f64::NEG_INFINITY;
        let mut gx = 0.0;
        for (i, v) in act.verts.iter().enumerate() {
            let g: f64 = v.iter().map(|&c| gu[c as usize]).sum();
            gx += act.alpha[i] * g;
            if g > ga {
                ga = g;
                away = i;
            }
        }
        gap = (gx - gs).max(0.0);
        let val = obj.value(&act.r).unwrap_or(f64::INFINITY);
        if gap <= rel_tol * val.abs().max(1.0) || stop(&act.r, val, gap) {
            return PfwRun { iterations: it, gap, status: SolveStatus::Optimal };
        }
        let si = act.find_or_add(spec, s);
        if si == away {
            return PfwRun { iterations: it, gap, status: SolveStatus::Stalled };
        }
        let gmax = act.alpha[away];
        let delta: Vec<f64> = act.vrates[si]
            .iter()
            .zip(&act.vrates[away])
            .map(|(a, b)| a - b)
            .collect();
        let gamma = line_search(obj, &act.r, &delta, gmax, &mut scratch);
        if gamma <= 0.0 {
            if act.alpha[si] == 0.0 {
                act.remove(si);
            }
            stalls += 1;
            if stalls >= 25 {
                return PfwRun { iterations: it, gap, status: SolveStatus::Stalled };
            }
            act.refresh_rates();
            continue;
        }
        stalls = 0;
        for (x, d) in act.r.iter_mut().zip(&delta) {
            *x += gamma * d;
        }
        act.alpha[si] += gamma;
        if gamma >= gmax {
            act.alpha[away] = 0.0;
            act.remove(away);
            act.refresh_rates();
        } else {
            act.alpha[away] -= gamma;
        }
        newton_on_active_set(spec, obj, act, &mut dr, &mut scratch);
    }
    PfwRun { iterations: max_iter, gap, status: SolveStatus::MaxIter }
}

const NEWTON_MAX_VERTICES: usize = 128;

/// One Newton step over the weights of the current active set, which lets
/// the method settle on a face without zigzagging between its vertices.
fn newton_on_active_set(
    spec: &SubproblemSpec,
    obj: &dyn RateObjective,
    act: &mut ActiveSet,
    dr: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let m = act.verts.len();
    if !(2..=NEWTON_MAX_VERTICES).contains(&m) || !obj.grad(&act.r, dr) {
        return;
    }
    let Some(h) = obj.hessian(&act.r) else {
        return;
    };
    let nq = spec.queues.len();
    let dot = |v: &[f64], w: &[f64]| -> f64 { v.iter().zip(w).map(|(a, b)| a * b).sum() };
    let g: Vec<f64> = act.vrates.iter().map(|v| dot(v, dr)).collect();
    let dense: Option<(f64, Vec<f64>)> =
        h.dense.as_ref().map(|(c, u)| (*c, act.vrates.iter().map(|v| dot(v, u)).collect()));
    // Projection of every vertex on each queue's low-rank direction.
    let mut proj = vec![vec![0.0; nq]; m];
    for (k, v) in act.vrates.iter().enumerate() {
        for (e, ent) in spec.entries.iter().enumerate() {
            proj[k][ent.queue] += v[e] * h.g[e];
        }
    }
    // KKT system [H 1; 1ᵀ 0] [d; ν] = [-g; 0].
    let size = m + 1;
    let mut a = vec![0.0; size * size];
    let mut b = vec![0.0; size];
    for k in 0..m {
        for l in k..m {
            let mut v: f64 = act.vrates[k]
                .iter()
                .zip(&act.vrates[l])
                .zip(&h.diag)
                .map(|((x, y), d)| x * d * y)
                .sum();
            v += (0..nq).map(|q| h.coef[q] * proj[k][q] * proj[l][q]).sum::<f64>();
            if let Some((c, pu)) = &dense {
                v += c * pu[k] * pu[l];
            }
            a[k * size + l] = v;
            a[l * size + k] = v;
        }
        a[k * size + m] = 1.0;
        a[m * size + k] = 1.0;
        b[k] = -g[k];
    }
    let scale = (0..m).map(|k| a[k * size + k]).fold(0.0, f64::max);
    // A nearly flat direction makes the plain step run into a weight bound
    // and drop a vertex the next linear oracle call puts straight back. When
    // that happens a damped step is tried as well and the better one kept.
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for reg in [1e-12, 1e-6] {
        let Some((value, alpha, r, blocked)) = newton_candidate(obj, act, &a, &b, &g, size, reg * scale, scratch)
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
            best = Some((value, alpha, r));
        }
        if !blocked {
            break;
        }
    }
    let Some((_, alpha, r)) = best else {
        return;
    };
    act.alpha = alpha;
    act.r = r;
    for k in (0..act.verts.len()).rev() {
        if act.alpha[k] <= 0.0 {
            act.remove(k);
        }
    }
}

/// Damped Newton step over the active weights: returns the objective, the
/// new weights and rates, and whether a weight bound stopped the step.
#[allow(clippy::too_many_arguments)]
fn newton_candidate(
    obj: &dyn RateObjective,
    act: &ActiveSet,
    kkt: &[f64],
    rhs: &[f64],
    g: &[f64],
    size: usize,
    reg: f64,
    scratch: &mut Vec<f64>,
) -> Option<(f64, Vec<f64>, Vec<f64>, bool)> {
    let m = size - 1;
    let mut a = kkt.to_vec();
    let mut b = rhs.to_vec();
    for k in 0..m {
        a[k * size + k] += reg;
    }
    let sol = solve_dense(&mut a, &mut b, size)?;
    // Back on the sum-zero plane: an ill-conditioned solve leaks mass.
    let mean = sol[..m].iter().sum::<f64>() / m as f64;
    let d: Vec<f64> = sol[..m].iter().map(|v| v - mean).collect();
    let d = &d[..];
    if d.iter().any(|v| !v.is_finite()) || g.iter().zip(d).map(|(x, y)| x * y).sum::<f64>() >= 0.0 {
        return None;
    }
    let mut tmax = f64::INFINITY;
    let mut blocking = None;
    for (k, &dk) in d.iter().enumerate() {
        if dk < 0.0 {
            let t = act.alpha[k] / -dk;
            if t < tmax {
                tmax = t;
                blocking = Some(k);
            }
        }
    }
    let mut delta = vec![0.0; act.r.len()];
    for (v, &dk) in act.vrates.iter().zip(d) {
        for (x, y) in delta.iter_mut().zip(v) {
            *x += dk * y;
        }
    }
    let gamma = line_search(obj, &act.r, &delta, tmax, scratch);
    if gamma <= 0.0 {
        return None;
    }
    let mut alpha: Vec<f64> = act.alpha.iter().zip(d).map(|(a, dk)| (a + gamma * dk).max(0.0)).collect();
    let blocked = gamma >= tmax && tmax < 1.0;
    if gamma >= tmax {
        if let Some(k) = blocking {
            alpha[k] = 0.0;
        }
    }
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    // Rates come from the weights so that dropping a vertex cannot push a
    // rate only it supplied through zero by cancellation.
    let mut r = vec![0.0; act.r.len()];
    for (a, v) in alpha.iter().zip(&act.vrates) {
        for (x, y) in r.iter_mut().zip(v) {
            *x += a * y;
        }
    }
    let value = obj.value(&r)?;
    Some((value, alpha, r, blocked))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for c in col..n {
                    a[row * n + c] -= f * a[col * n + c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row * n + c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

/// Minimizes the convex `h(γ) = obj(r + γ δ)` over `[0, gmax]` by bisection on
/// `h'`; points outside the domain count as `h' > 0`.
fn line_search(obj: &dyn RateObjective, r: &[f64], delta: &[f64], gmax: f64, scratch: &mut Vec<f64>) -> f64 {
    let mut point = vec![0.0; r.len()];
    let deriv = |g: f64, point: &mut Vec<f64>, scratch: &mut Vec<f64>| -> Option<f64> {
        for ((p, x), d) in point.iter_mut().zip(r).zip(delta) {
            *p = x + g * d;
        }
        if !obj.grad(point, scratch) {
            return None;
        }
        Some(scratch.iter().zip(delta).map(|(a, b)| a * b).sum())
    };
    match deriv(0.0, &mut point, scratch) {
        Some(d0) if d0 < 0.0 => {}
        _ => return 0.0,
    }
    if let Some(d) = deriv(gmax, &mut point, scratch) {
        if d <= 0.0 {
            return gmax;
        }
    }
    let (mut lo, mut hi) = (0.0, gmax);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match deriv(mid, &mut point, scratch) {
            Some(d) if d <= 0.0 => lo = mid,
            _ => hi = mid,
        }
    }
    lo
}

// ---------------------------------------------------------------------------
// Driver

fn start_set(spec: &SubproblemSpec, start: Option<&[f64]>) -> ActiveSet {
    let usable = |u: &[f64]| {
        let r = spec.rates(u);
        spec.entries
            .iter()
            .zip(&r)
            .all(|(ent, &re)| re > 0.0 || (ent.cons == 0.0 && ent.weight == 0.0))
    };
    let u = match start {
        Some(u) if usable(u) => u.to_vec(),
        _ => spec.polytope.interior(),
    };
    ActiveSet::new(spec, spec.polytope.decompose(&u))
}

/// Phase one: looks for a point with every utilization ratio below one by
/// minimizing a smoothed max of the ratios, sharpening the smoothing when the
/// minimizer still sits on the boundary. Leaves `act` at the best point seen.
fn phase_one(spec: &SubproblemSpec, act: &mut ActiveSet, opts: &SolverOptions) -> (PhaseOne, usize) {
    let m = spec.n_constrained();
    let start_ratio = spec.max_ratio(&act.r);
    if m == 0 || start_ratio < 1.0 - opts.phase1_margin {
        return (PhaseOne::StrictlyFeasible, 0);
    }
    let log_m = (m as f64).ln();
    let mut best = (start_ratio, act.clone());
    let mut lower = f64::NEG_INFINITY;
    let mut iters = 0;
    let mut tau = opts.phase1_tau;
    while iters < opts.phase1_max_iter {
        let obj = SmoothMax { spec, tau, r_min: opts.r_min };
        let mut stop = |r: &[f64], val: f64, gap: f64| {
            lower = lower.max(val - gap - tau * log_m);
            spec.max_ratio(r) <= 1.0 - opts.phase1_margin || lower > 1.0
        };
        let run = pfw(spec, &obj, act, 1e-12, opts.phase1_max_iter - iters, &mut stop);
        iters += run.iterations.max(1);
        let ratio = spec.max_ratio(&act.r);
        if ratio < best.0 {
            best = (ratio, act.clone());
        }
        if lower > 1.0 {
            return (PhaseOne::Infeasible { lower_bound: lower }, iters);
        }
        if best.0 <= 1.0 - opts.phase1_margin || lower >= 1.0 - opts.phase1_margin || tau <= opts.phase1_tau_min {
            break;
        }
        tau *= 0.1;
    }
    *act = best.1;
    let outcome = if best.0 <= 1.0 - opts.phase1_margin {
        PhaseOne::StrictlyFeasible
    } else if best.0 <= 1.0 + 1e-9 {
        PhaseOne::Boundary { proven: lower >= 1.0 - opts.phase1_margin }
    } else {
        PhaseOne::Infeasible { lower_bound: lower }
    };
    (outcome, iters)
}

/// Solves a subproblem from an optional warm start.
pub fn solve(spec: &SubproblemSpec, start: Option<&[f64]>, opts: &SolverOptions) -> SolveResult {
    let dim = spec.polytope.dim();
    assert_eq!(spec.columns.len(), dim, "column count must match the polytope");
    let mut act = start_set(spec, start);
    let (p1, mut iterations) = phase_one(spec, &mut act, opts);
    log::trace!("phase one {:?} iters {iterations} ratio {}", p1, spec.max_ratio(&act.r));
    let finish = |act: &ActiveSet, gap: f64, bound: f64, status: SolveStatus, iterations: usize| {
        let u = act.point(dim);
        let rates = spec.rates(&u);
        SolveResult {
            objective: spec.objective(&rates, opts.r_min),
            max_ratio: spec.max_ratio(&rates),
            rates,
            u,
            gap,
            barrier_bound: bound,
            status,
            iterations,
        }
    };
    match p1 {
        PhaseOne::Infeasible { lower_bound } => {
            log::debug!("phase one: no strictly feasible point, ratio bound {lower_bound}");
            return finish(&act, f64::INFINITY, 0.0, SolveStatus::Infeasible, iterations);
        }
        PhaseOne::Boundary { proven } => {
            log::debug!("phase one: no interior point (proven: {proven}), keeping the best feasible point");
            let status = if proven { SolveStatus::Optimal } else { SolveStatus::MaxIter };
            return finish(&act, 0.0, 0.0, status, iterations);
        }
        PhaseOne::StrictlyFeasible => {}
    }
    let m = spec.n_constrained();
    let scale = spec.objective(&act.r, opts.r_min).abs().max(f64::MIN_POSITIVE);
    let factors: Vec<f64> = if m == 0 { vec![0.0] } else { opts.barrier_factors.clone() };
    let mut last = PfwRun { iterations: 0, gap: f64::INFINITY, status: SolveStatus::Optimal };
    let mut mu = 0.0;
    for (stage, &factor) in factors.iter().enumerate() {
        mu = factor * scale;
        let obj = Barrier { spec, mu, r_min: opts.r_min };
        let tol = if stage + 1 == factors.len() { opts.gap_tol } else { opts.stage_gap_tol };
        last = pfw(spec, &obj, &mut act, tol, opts.max_iter, &mut |_, _, _| false);
        iterations += last.iterations;
        log::trace!("stage {stage} mu {mu} iters {} gap {} status {:?}", last.iterations, last.gap, last.status);
    }
    act.refresh_rates();
    finish(&act, last.gap, m as f64 * mu, last.status, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_queue(rates: &[f64], lambda: f64, cap: Option<f64>) -> SubproblemSpec {
        // one entry, rate = Σ_c rates[c] u_c
        SubproblemSpec {
            queues: vec![QueueSpec { curvature: lambda, cap }],
            entries: vec![EntrySpec { queue: 0, weight: lambda, cons: lambda }],
            columns: rates.iter().map(|&v| if v > 0.0 { vec![(0, v)] } else { vec![] }).collect(),
            polytope: Polytope::Simplex { dim: rates.len() },
        }
    }

    #[test]
    fn simplex_lmo_picks_smallest() {
        assert_eq!(Polytope::Simplex { dim: 3 }.lmo(&[3.0, 1.0, 2.0]), vec![1]);
        assert_eq!(Polytope::Simplex { dim: 3 }.lmo(&[1.0, 1.0, 2.0]), vec![0]);
    }

    #[test]
    fn coupled_lmo_single_pattern() {
        let p = Polytope::coupled(1, 2);
        // u = [y_∅, y_1, x(0,0,∅), x(0,0,1), x(0,1,∅), x(0,1,1)]
        let g = [0.0, 0.0, 0.0, 5.0, 0.0, 2.0];
        let mut v = p.lmo(&g);
        v.sort();
        assert_eq!(v, vec![1, 5]);
    }

    #[test]
    fn decompose_round_trips() {
        let p = Polytope::coupled(2, 3);
        let u = p.interior();
        let parts = p.decompose(&u);
        let mut back = vec![0.0; p.dim()];
        for (v, a) in &parts {
            for &c in v {
                back[c as usize] += a;
            }
        }
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_pattern_goes_to_the_only_useful_vertex() {
        let spec = one_queue(&[0.0, 2.0], 1.0, Some(0.9));
        let res = solve(&spec, None, &SolverOptions::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.u[1] - 1.0).abs() < 1e-9);
        assert!((res.objective - (0.25 + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn overload_is_infeasible() {
        let spec = one_queue(&[0.0, 2.0], 3.0, Some(0.9));
        let res = solve(&spec, None, &SolverOptions::default());
        assert_eq!(res.status, SolveStatus::Infeasible);
    }

    #[test]
    fn two_queues_split_orthogonal_columns() {
        // column 0 serves queue 0, column 1 serves queue 1, equal loads
        let spec = SubproblemSpec {
            queues: vec![QueueSpec { curvature: 1.0, cap: Some(0.99) }; 2],
            entries: vec![
                EntrySpec { queue: 0, weight: 1.0, cons: 1.0 },
                EntrySpec { queue: 1, weight: 1.0, cons: 1.0 },
            ],
            columns: vec![vec![(0, 10.0)], vec![(1, 10.0)]],
            polytope: Polytope::Simplex { dim: 2 },
        };
        let res = solve(&spec, None, &SolverOptions::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.u[0] - 0.5).abs() < 1e-5, "{:?}", res.u);
    }
}
