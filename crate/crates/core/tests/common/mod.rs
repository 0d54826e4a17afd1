//! Helpers shared by the integration tests: random instances and the
//! brute-force oracles the library is checked against.

#![allow(dead_code)]

use dualscale_core::allocation::x_index;
use dualscale_core::convex::SubproblemSpec;
use dualscale_core::pattern::pattern_count;
use dualscale_core::Pattern;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random distribution over `len` entries, every entry positive.
pub fn dense_dist(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Random distribution with roughly half the entries zero; the last entry
/// (the full pattern, for pattern vectors) always keeps some mass.
pub fn sparse_dist(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.5) { rng.gen::<f64>() } else { 0.0 }).collect();
    v[len - 1] += 1e-3;
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// `z` with all time on the full pattern.
pub fn z_full(n: usize) -> Vec<f64> {
    let mut z = vec![0.0; pattern_count(n)];
    z[pattern_count(n) - 1] = 1.0;
    z
}

/// Random link splits `x` consistent with `y`; `sparse` leaves some links
/// of each AP and pattern unused.
pub fn random_split(rng: &mut ChaCha8Rng, n: usize, k: usize, y: &[f64], sparse: bool) -> Vec<f64> {
    let mut x = vec![0.0; n * k * pattern_count(n)];
    for f in Pattern::all(n) {
        for i in f.members() {
            let w = if sparse { sparse_dist(rng, k) } else { dense_dist(rng, k) };
            for (j, wj) in w.iter().enumerate() {
                x[x_index(n, k, i, j, f)] = wj * y[f.index()];
            }
        }
    }
    x
}

/// `(lo, hi)` with `0 ≤ lo ≤ hi ≤ 1` componentwise; some coordinates are
/// pinned to the interval ends.
pub fn ordered_pair(rng: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(len);
    let mut hi = Vec::with_capacity(len);
    for _ in 0..len {
        let a: f64 = match rng.gen_range(0..10) {
            0 => 0.0,
            _ => rng.gen(),
        };
        let b = match rng.gen_range(0..10) {
            0 => 1.0,
            1 => a,
            _ => a + rng.gen::<f64>() * (1.0 - a),
        };
        lo.push(a);
        hi.push(b);
    }
    (lo, hi)
}

/// Nested bisection for the fixed point `u = map(u)` below `upper`.
///
/// The outermost coordinate is bisected on `t - map_0(t, rest(t))`, where
/// `rest(t)` solves the remaining coordinates the same way with the leading
/// ones frozen. Needs a monotone map with `map(upper) ≤ upper`.
pub fn nested_bisection(map: &dyn Fn(&[f64]) -> Vec<f64>, upper: &[f64], tol: f64) -> Vec<f64> {
    fn solve(map: &dyn Fn(&[f64]) -> Vec<f64>, upper: &[f64], fixed: &mut Vec<f64>, tol: f64) -> Vec<f64> {
        let c = fixed.len();
        let n = upper.len();
        if c == n {
            return Vec::new();
        }
        let eval = |t: f64, fixed: &mut Vec<f64>| -> (f64, Vec<f64>) {
            fixed.push(t);
            let rest = solve(map, upper, fixed, tol);
            let mut full = fixed.clone();
            full.extend_from_slice(&rest);
            fixed.pop();
            let image = map(&full)[c];
            (t - image, rest)
        };
        let (mut lo, mut hi) = (0.0, upper[c]);
        if eval(lo, fixed).0 >= 0.0 {
            hi = lo;
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if eval(mid, fixed).0 >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (_, rest) = eval(hi, fixed);
        let mut out = vec![hi];
        out.extend(rest);
        out
    }
    solve(map, upper, &mut Vec::new(), tol)
}

/// Grid search over the simplex of dimension 4 at resolution `1/steps`:
/// smallest objective among points whose load ratios stay at or below one.
pub fn grid_search_4(spec: &SubproblemSpec, steps: usize, r_min: f64) -> Option<(f64, Vec<f64>)> {
    assert_eq!(spec.columns.len(), 4);
    let h = 1.0 / steps as f64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for a in 0..=steps {
        for b in 0..=steps - a {
            for c in 0..=steps - a - b {
                let d = steps - a - b - c;
                let u = [a as f64 * h, b as f64 * h, c as f64 * h, d as f64 * h];
                let r = spec.rates(&u);
                if spec.max_ratio(&r) > 1.0 {
                    continue;
                }
                let v = spec.objective(&r, r_min);
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, u.to_vec()));
                }
            }
        }
    }
    best
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense or sparse distribution, chosen at random.
pub fn any_dist(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    if rng.gen_bool(0.5) {
        sparse_dist(rng, len)
    } else {
        dense_dist(rng, len)
    }
}
