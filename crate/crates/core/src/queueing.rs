//! Closed-form queueing quantities: busy-set probabilities, service rates under
//! the three rate models, the multi-class M/G/1 delay approximation and the
//! utilization fixed-point maps.

use crate::allocation::x_index;
use crate::error::{Error, Result};
use crate::pattern::{pattern_count, Pattern};
use crate::scenario::EffTable;
use crate::sched::Kernel;

/// Product-form probability of every busy set: `p[A] = Π_{l∈A} ρ_l Π_{l∉A} (1-ρ_l)`.
pub fn busy_probs(rho: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; pattern_count(rho.len())];
    p[0] = 1.0;
    for (i, &r) in rho.iter().enumerate() {
        let half = 1usize << i;
        for a in 0..half {
            p[a | half] = p[a] * r;
            p[a] *= 1.0 - r;
        }
    }
    p
}

/// `p_A / ρ_i` for every `A ∋ i` (zero elsewhere), computed as the product over
/// the other APs so that it stays defined at `ρ_i = 0`.
pub fn conditional_weights(rho: &[f64], i: usize) -> Vec<f64> {
    let mut others = rho.to_vec();
    others[i] = 1.0;
    busy_probs(&others)
}

/// Service rate per queue and busy/interferer set, packets/s.
#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    n: usize,
    queues: usize,
    data: Vec<f64>,
}

impl RateTable {
    pub fn new(queues: usize, n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), queues * pattern_count(n));
        RateTable { n, queues, data }
    }

    pub fn n_aps(&self) -> usize {
        self.n
    }

    pub fn n_queues(&self) -> usize {
        self.queues
    }

    #[inline]
    pub fn get(&self, q: usize, set: Pattern) -> f64 {
        self.data[(q << self.n) + set.index()]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let np = pattern_count(self.n);
        &self.data[q * np..(q + 1) * np]
    }
}

/// Slow-timescale rates: `r[i][A] = Σ_F s[i][F∩A] y_F`.
pub fn rates_fixed(y: &[f64], eff: &EffTable) -> RateTable {
    let n = eff.n_aps();
    let np = pattern_count(n);
    let mut data = vec![0.0; n * np];
    for i in 0..n {
        for a in Pattern::all(n).filter(|a| a.contains(i)) {
            data[i * np + a.index()] = y
                .iter()
                .enumerate()
                .filter(|(_, &yf)| yf > 0.0)
                .map(|(f, &yf)| yf * eff.served(i, Pattern::from_bits(f as u32).intersect(a)))
                .sum();
        }
    }
    RateTable::new(n, n, data)
}

/// Dual-timescale rates: `r[i][A] = Σ_F Σ_T η^i_{F,T,A} y_F z_T`.
pub fn rates_dual(y: &[f64], z: &[f64], kernel: &Kernel) -> RateTable {
    let n = kernel.n_aps();
    let np = pattern_count(n);
    let m = kernel.collapse_over_time(z);
    let mut data = vec![0.0; n * np];
    for i in 0..n {
        for a in Pattern::all(n).filter(|a| a.contains(i)) {
            data[i * np + a.index()] = y
                .iter()
                .enumerate()
                .filter(|(_, &yf)| yf > 0.0)
                .map(|(f, &yf)| yf * m.get(i, f, a))
                .sum();
        }
    }
    RateTable::new(n, n, data)
}

/// Flexible-association rates per UE group and interferer set:
/// `r[j][I] = Σ_T z_T Σ_F Σ_i η^{i->j}_{F,T,I} x^{i->j}_F`.
pub fn rates_flex(x: &[f64], z: &[f64], kernel: &Kernel) -> RateTable {
    let n = kernel.n_aps();
    let k = kernel.n_groups();
    let np = pattern_count(n);
    let m = kernel.collapse_over_time_flex(z);
    let mut data = vec![0.0; k * np];
    for j in 0..k {
        let links: Vec<(usize, f64)> = (0..n)
            .flat_map(|i| Pattern::all(n).filter(move |f| f.contains(i)).map(move |f| (i, f)))
            .map(|(i, f)| (i * np + f.index(), x[x_index(n, k, i, j, f)]))
            .filter(|&(_, v)| v > 0.0)
            .collect();
        for set in Pattern::all(n) {
            data[j * np + set.index()] = links.iter().map(|&(col, v)| v * m.get(j, col, set)).sum();
        }
    }
    RateTable::new(k, n, data)
}

/// Mean delay of one queue under the multi-class M/G/1 approximation:
/// `d = Σ_A w_A ((1/r_A)² λ/(1-ρ) + 1/r_A)`. Sets with zero weight are skipped.
/// A queue without traffic reports the delay a probe packet would see, which
/// is infinite where it has no service.
pub fn delay_mg1(queue: usize, lambda: f64, rho: f64, weights: &[f64], rates: &[f64]) -> Result<f64> {
    if !(rho < 1.0) {
        return Err(Error::UnstableQueue { queue, rho });
    }
    let wait = lambda / (1.0 - rho);
    let mut d = 0.0;
    for (a, (&w, &r)) in weights.iter().zip(rates).enumerate() {
        if w <= 0.0 {
            continue;
        }
        if !(r > 0.0) {
            if lambda == 0.0 {
                return Ok(f64::INFINITY);
            }
            return Err(Error::ZeroServiceRate {
                queue,
                set: Pattern::from_bits(a as u32),
            });
        }
        let inv = 1.0 / r;
        d += w * (inv * inv * wait + inv);
    }
    Ok(d)
}

/// Per-AP delays under fixed association.
pub fn delays_fixed(rho: &[f64], rates: &RateTable, lambda: &[f64]) -> Result<Vec<f64>> {
    (0..rho.len())
        .map(|i| {
            if lambda[i] > 0.0 && rho[i] <= 0.0 {
                return Err(Error::DegenerateUtilization { queue: i });
            }
            delay_mg1(i, lambda[i], rho[i], &conditional_weights(rho, i), rates.row(i))
        })
        .collect()
}

/// Per-UE-group delays under flexible association; weights are `p_I` over all `I`.
pub fn delays_flex(sigma: &[f64], rho: &[f64], rates: &RateTable, lambda: &[f64]) -> Result<Vec<f64>> {
    let p = busy_probs(rho);
    (0..sigma.len())
        .map(|j| {
            if lambda[j] > 0.0 && sigma[j] <= 0.0 {
                return Err(Error::DegenerateUtilization { queue: j });
            }
            delay_mg1(j, lambda[j], sigma[j], &p, rates.row(j))
        })
        .collect()
}

/// `Σ_q λ_q d_q`.
pub fn network_objective(lambda: &[f64], delays: &[f64]) -> f64 {
    lambda.iter().zip(delays).filter(|(l, _)| **l > 0.0).map(|(l, d)| l * d).sum()
}

/// `Σ_A w_A λ / r_A` where zero rates with positive weight give `+inf`.
fn load_sum(lambda: f64, weights: &[f64], rates: &[f64]) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (&w, &r) in weights.iter().zip(rates) {
        if w > 0.0 {
            if !(r > 0.0) {
                return f64::INFINITY;
            }
            s += w / r;
        }
    }
    lambda * s
}

fn first_zero_rate(weights: &[f64], rates: &[f64]) -> Pattern {
    let a = weights
        .iter()
        .zip(rates)
        .position(|(&w, &r)| w > 0.0 && !(r > 0.0))
        .unwrap_or(0);
    Pattern::from_bits(a as u32)
}

fn f_map_raw(rho: &[f64], rates: &RateTable, lambda: &[f64]) -> Vec<f64> {
    (0..rho.len())
        .map(|i| load_sum(lambda[i], &conditional_weights(rho, i), rates.row(i)))
        .collect()
}

/// `f^i(ρ) = λ^i Σ_{A∋i} (p_A/ρ_i) / r[i][A]`.
pub fn f_map(rho: &[f64], rates: &RateTable, lambda: &[f64]) -> Result<Vec<f64>> {
    let out = f_map_raw(rho, rates, lambda);
    for (i, v) in out.iter().enumerate() {
        if v.is_infinite() {
            let w = conditional_weights(rho, i);
            return Err(Error::ZeroServiceRate {
                queue: i,
                set: first_zero_rate(&w, rates.row(i)),
            });
        }
    }
    Ok(out)
}

/// Per-AP utilization implied by UE-group utilizations:
/// `ρ_i = Σ_{F∋i} Σ_j σ_j x^{i->j}_F / Σ_{F∋i} y_F`, zero for APs without spectrum.
pub fn rho_from_sigma(sigma: &[f64], x: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let k = sigma.len();
    (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for f in Pattern::all(n).filter(|f| f.contains(i)) {
                den += y[f.index()];
                for (j, &s) in sigma.iter().enumerate() {
                    num += s * x[x_index(n, k, i, j, f)];
                }
            }
            if den > 0.0 {
                (num / den).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Everything `g` needs besides σ.
#[derive(Clone, Copy, Debug)]
pub struct FlexSystem<'a> {
    pub n: usize,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub rates: &'a RateTable,
    pub lambda: &'a [f64],
}

impl FlexSystem<'_> {
    fn g_raw(&self, sigma: &[f64]) -> Vec<f64> {
        let p = busy_probs(&rho_from_sigma(sigma, self.x, self.y, self.n));
        (0..sigma.len())
            .map(|j| load_sum(self.lambda[j], &p, self.rates.row(j)))
            .collect()
    }

    /// `g_j(σ) = Σ_I p_I(ρ(σ)) λ_j / r[j][I]`.
    pub fn g_map(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        let out = self.g_raw(sigma);
        if let Some(j) = out.iter().position(|v| v.is_infinite()) {
            let p = busy_probs(&rho_from_sigma(sigma, self.x, self.y, self.n));
            return Err(Error::ZeroServiceRate {
                queue: j,
                set: first_zero_rate(&p, self.rates.row(j)),
            });
        }
        Ok(out)
    }

    pub fn rho(&self, sigma: &[f64]) -> Vec<f64> {
        rho_from_sigma(sigma, self.x, self.y, self.n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// Allowed violation of `start ≥ map(start)` before reporting a
    /// non-contractive start.
    pub start_slack: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            eps: 1e-8,
            max_iter: 10_000,
            start_slack: 1e-9,
        }
    }
}

/// Result of a utilization fixed-point iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub util: Vec<f64>,
    pub iterations: usize,
    /// Iterates `u^(0), u^(1), ..` including the start and the returned point.
    pub history: Vec<Vec<f64>>,
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Iterates `u <- map(u)` from a start with `u ≥ map(u)`. Stops once a step
/// moves less than `eps` and returns the point before that step.
fn iterate_monotone<M>(start: &[f64], map: M, opts: &FixedPointOptions) -> Result<FixedPoint>
where
    M: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut cur = start.to_vec();
    let mut next = map(&cur)?;
    for (i, (&s, &im)) in cur.iter().zip(&next).enumerate() {
        if im > s + opts.start_slack {
            return Err(Error::NonContractiveStart { index: i, start: s, image: im });
        }
    }
    let mut history = vec![cur.clone()];
    for it in 0..opts.max_iter {
        if sup_dist(&cur, &next) < opts.eps {
            return Ok(FixedPoint { util: cur, iterations: it, history });
        }
        cur = next;
        history.push(cur.clone());
        next = map(&cur)?;
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, last: cur })
}

/// Clamped iteration `u <- min(1, map(u))` from `u = 1`; infinite images
/// (zero rates) clamp to one. Used to evaluate arbitrary allocations, where a
/// coordinate stuck at one means the queue is unstable.
fn iterate_clamped<M>(n: usize, map: M, opts: &FixedPointOptions) -> Result<FixedPoint>
where
    M: Fn(&[f64]) -> Vec<f64>,
{
    let mut cur = vec![1.0; n];
    let mut history = vec![cur.clone()];
    for it in 0..opts.max_iter {
        let next: Vec<f64> = map(&cur).into_iter().map(|v| v.min(1.0)).collect();
        let done = sup_dist(&cur, &next) < opts.eps;
        cur = next;
        history.push(cur.clone());
        if done {
            return Ok(FixedPoint { util: cur, iterations: it + 1, history });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, last: cur })
}

/// Fixed point of `f` reached from `rho0 ≥ f(rho0)`.
pub fn fixed_point_rho(rho0: &[f64], rates: &RateTable, lambda: &[f64], opts: &FixedPointOptions) -> Result<FixedPoint> {
    iterate_monotone(rho0, |r| f_map(r, rates, lambda), opts)
}

/// Largest fixed point of `min(1, f)`, reached from `ρ = 1`.
pub fn fixed_point_rho_from_top(rates: &RateTable, lambda: &[f64], opts: &FixedPointOptions) -> Result<FixedPoint> {
    iterate_clamped(lambda.len(), |r| f_map_raw(r, rates, lambda), opts)
}

/// Fixed point of `g` reached from `sigma0 ≥ g(sigma0)`.
pub fn fixed_point_sigma(sigma0: &[f64], sys: &FlexSystem<'_>, opts: &FixedPointOptions) -> Result<FixedPoint> {
    iterate_monotone(sigma0, |s| sys.g_map(s), opts)
}

/// Largest fixed point of `min(1, g)`, reached from `σ = 1`.
pub fn fixed_point_sigma_from_top(sys: &FlexSystem<'_>, opts: &FixedPointOptions) -> Result<FixedPoint> {
    iterate_clamped(sys.lambda.len(), |s| sys.g_raw(s), opts)
}

/// Utilizations and busy-set probabilities at an operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilState {
    pub rho: Vec<f64>,
    /// UE-group utilizations; only under flexible association.
    pub sigma: Option<Vec<f64>>,
    pub p: Vec<f64>,
}

impl UtilState {
    pub fn from_rho(rho: Vec<f64>) -> Self {
        let p = busy_probs(&rho);
        UtilState { rho, sigma: None, p }
    }

    pub fn from_sigma(sigma: Vec<f64>, rho: Vec<f64>) -> Self {
        let p = busy_probs(&rho);
        UtilState { rho, sigma: Some(sigma), p }
    }

    /// Utilizations of the queues: σ under flexible association, else ρ.
    pub fn queue_util(&self) -> &[f64] {
        self.sigma.as_deref().unwrap_or(&self.rho)
    }

    pub fn max_util(&self) -> f64 {
        self.queue_util().iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn busy_probs_examples() {
        let p = busy_probs(&[0.5, 0.5]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = busy_probs(&[1.0, 0.3]);
        assert_abs_diff_eq!(p[0b11], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0b01], 0.7, epsilon = 1e-15);
        assert_eq!(p[0b10], 0.0);
        assert_eq!(p[0b00], 0.0);
    }

    #[test]
    fn marginals_match_rho() {
        let rho = [0.1, 0.7, 0.33, 0.9];
        let p = busy_probs(&rho);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (i, &r) in rho.iter().enumerate() {
            let m: f64 = Pattern::all(4).filter(|a| a.contains(i)).map(|a| p[a.index()]).sum();
            assert_abs_diff_eq!(m, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_weights_divide_out_own_rho() {
        let rho = [0.2, 0.6, 0.5];
        let p = busy_probs(&rho);
        let w = conditional_weights(&rho, 1);
        for a in Pattern::all(3) {
            let want = if a.contains(1) { p[a.index()] / rho[1] } else { 0.0 };
            assert_abs_diff_eq!(w[a.index()], want, epsilon = 1e-14);
        }
        // still defined when the AP itself is idle
        let w0 = conditional_weights(&[0.0, 0.5], 0);
        assert_abs_diff_eq!(w0.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mm1_delay_is_exact() {
        let d = delay_mg1(0, 1.0, 0.5, &[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn equal_rates_collapse_to_mm1() {
        let (lambda, r) = (1.5, 4.0);
        let rho = lambda / r;
        let w = [0.0, 0.3, 0.0, 0.7];
        let d = delay_mg1(0, lambda, rho, &w, &[0.0, r, 0.0, r]).unwrap();
        assert_abs_diff_eq!(d, 1.0 / (r - lambda), epsilon = 1e-12);
    }

    #[test]
    fn delay_errors() {
        assert!(matches!(
            delay_mg1(3, 1.0, 1.0, &[1.0], &[2.0]),
            Err(Error::UnstableQueue { queue: 3, .. })
        ));
        assert!(matches!(
            delay_mg1(0, 1.0, 0.5, &[0.0, 1.0], &[0.0, 0.0]),
            Err(Error::ZeroServiceRate { queue: 0, .. })
        ));
    }

    fn table(n: usize, rows: &[&[f64]]) -> RateTable {
        RateTable::new(rows.len(), n, rows.concat())
    }

    #[test]
    fn f_map_limits() {
        let rates = table(1, &[&[0.0, 2.5]]);
        assert_abs_diff_eq!(f_map(&[0.9], &rates, &[1.0]).unwrap()[0], 0.4);
        assert_abs_diff_eq!(f_map(&[0.1], &rates, &[1.0]).unwrap()[0], 0.4);

        let rates = table(2, &[&[0.0, 4.0, 0.0, 2.0], &[0.0, 0.0, 5.0, 1.0]]);
        let lam = [1.0, 1.0];
        assert_abs_diff_eq!(f_map(&[0.5, 0.0], &rates, &lam).unwrap()[0], 0.25);
        assert_abs_diff_eq!(f_map(&[0.5, 1.0], &rates, &lam).unwrap()[0], 0.5);
        assert_abs_diff_eq!(f_map(&[0.0, 0.5], &rates, &lam).unwrap()[1], 0.2);
    }

    #[test]
    fn fixed_point_single_ap() {
        let rates = table(1, &[&[0.0, 2.5]]);
        let fp = fixed_point_rho(&[1.0], &rates, &[1.0], &FixedPointOptions::default()).unwrap();
        assert_abs_diff_eq!(fp.util[0], 0.4, epsilon = 1e-15);
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn fixed_point_returns_fixed_start() {
        let rates = table(1, &[&[0.0, 2.5]]);
        let fp = fixed_point_rho(&[0.4], &rates, &[1.0], &FixedPointOptions::default()).unwrap();
        assert_eq!(fp.util, vec![0.4]);
        assert_eq!(fp.iterations, 0);
    }

    #[test]
    fn fixed_point_rejects_low_start() {
        let rates = table(1, &[&[0.0, 2.5]]);
        let err = fixed_point_rho(&[0.1], &rates, &[1.0], &FixedPointOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonContractiveStart { index: 0, .. }));
    }

    #[test]
    fn from_top_flags_overload() {
        let rates = table(1, &[&[0.0, 0.5]]);
        let fp = fixed_point_rho_from_top(&rates, &[1.0], &FixedPointOptions::default()).unwrap();
        assert_eq!(fp.util, vec![1.0]);
    }

    #[test]
    fn sigma_zero_gives_idle_interferers() {
        // one AP, two groups splitting the single pattern
        let (n, k) = (1, 2);
        let y = [0.0, 1.0];
        let mut x = vec![0.0; n * k * 2];
        x[x_index(n, k, 0, 0, Pattern::full(1))] = 0.3;
        x[x_index(n, k, 0, 1, Pattern::full(1))] = 0.7;
        let rates = table(1, &[&[3.0, 3.0], &[7.0, 7.0]]);
        let lambda = [1.0, 2.0];
        let sys = FlexSystem { n, x: &x, y: &y, rates: &rates, lambda: &lambda };
        assert_eq!(sys.rho(&[0.0, 0.0]), vec![0.0]);
        let g = sys.g_map(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 2.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sys.rho(&[0.5, 1.0])[0], 0.3 * 0.5 + 0.7, epsilon = 1e-15);
    }

    #[test]
    fn ap_without_spectrum_is_idle() {
        let (n, k) = (2, 1);
        let y = [0.0, 1.0, 0.0, 0.0];
        let mut x = vec![0.0; n * k * 4];
        x[x_index(n, k, 0, 0, Pattern::singleton(0))] = 1.0;
        assert_eq!(rho_from_sigma(&[0.6], &x, &y, n), vec![0.6, 0.0]);
    }
}
