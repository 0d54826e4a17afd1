//! Discrete-event simulation of the interactive queues.
//!
//! Poisson arrivals, exponential packet work, FIFO per queue. Service rates
//! are recomputed from the set of nonempty queues after every event and the
//! head-of-line packet drains at the current rate (preemptive resume). Time
//! patterns are applied as fluid time-sharing.

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::allocation::{x_index, Allocation};
use crate::error::{Error, Result};
use crate::pattern::Pattern;
use crate::queueing::{self, RateTable};
use crate::report::{network_mean, DelayReport, DelaySource, QueueDelay};
use crate::scenario::{Association, Scenario};
use crate::sched::Kernel;

/// Queue length that aborts a run as unstable.
pub const SATURATION_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    /// Packets whose delays are measured, counted in arrival order and
    /// including the warm-up.
    pub n_packets: u64,
    pub seed: u64,
    /// Leading fraction of `n_packets` discarded as warm-up.
    pub warmup_fraction: f64,
    pub batches: usize,
    pub saturation_limit: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            n_packets: 200_000,
            seed: 1,
            warmup_fraction: 0.1,
            batches: 20,
            saturation_limit: SATURATION_LIMIT,
        }
    }
}

/// Report plus bookkeeping for consistency checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimResult {
    pub report: DelayReport,
    /// Integral of the service bit-rates over the run.
    pub bits_served: f64,
    /// Work of completed packets plus the progress on packets still queued.
    pub bits_accounted: f64,
    pub end_time_s: f64,
    pub events: u64,
}

/// Per-queue service bit-rates as a function of which queues are nonempty.
pub struct RateModel {
    n_queues: usize,
    kind: ModelKind,
    cache: HashMap<u64, Vec<f64>>,
}

enum ModelKind {
    /// Queue `i` is AP `i`; bit-rate `L r[i][A]`.
    Fixed { rates: RateTable, bits: f64 },
    Flex(FlexGroundTruth),
}

/// Flexible association evaluated per spectrum segment. Within pattern `F`
/// each AP lays its splits `x^{i->j}_F` out contiguously in group order; an
/// AP transmits on a segment only when that segment's group has data.
struct FlexGroundTruth {
    kernel: Kernel,
    bits: f64,
    /// Groups each AP serves, as a bitmask over groups.
    serves: Vec<u64>,
    time: Vec<(Pattern, f64)>,
    /// Per pattern: pieces of equal ownership, `(width, [(ap, group)])`.
    pieces: Vec<(Pattern, Vec<(f64, Vec<(usize, usize)>)>)>,
}

impl RateModel {
    pub fn new(scenario: &Scenario, alloc: &Allocation) -> Result<RateModel> {
        alloc.validate(scenario)?;
        let kernel = Kernel::new(scenario)?;
        let bits = scenario.mean_packet_bits;
        let (n_queues, kind) = match scenario.association {
            Association::Fixed { .. } => (
                scenario.n_aps(),
                ModelKind::Fixed { rates: queueing::rates_dual(&alloc.y, &alloc.z, &kernel), bits },
            ),
            Association::Flexible => {
                let x = alloc
                    .x
                    .as_deref()
                    .ok_or_else(|| Error::InvalidAllocation("flexible association needs x".into()))?;
                if scenario.n_groups() > 64 {
                    return Err(Error::InvalidScenario("simulation supports at most 64 UE groups".into()));
                }
                (scenario.n_groups(), ModelKind::Flex(FlexGroundTruth::new(kernel, bits, alloc, x)))
            }
        };
        Ok(RateModel { n_queues, kind, cache: HashMap::new() })
    }

    pub fn n_queues(&self) -> usize {
        self.n_queues
    }

    /// Bit-rates of every queue when exactly the queues in `nonempty` hold
    /// packets. Empty queues get rate zero.
    pub fn rates(&mut self, nonempty: u64) -> &[f64] {
        let n_queues = self.n_queues;
        let kind = &self.kind;
        self.cache.entry(nonempty).or_insert_with(|| {
            let mut out = vec![0.0; n_queues];
            match kind {
                ModelKind::Fixed { rates, bits } => {
                    let busy = Pattern::from_bits(nonempty as u32);
                    for i in busy.members() {
                        out[i] = bits * rates.get(i, busy);
                    }
                }
                ModelKind::Flex(gt) => gt.rates(nonempty, &mut out),
            }
            out
        })
    }
}

impl FlexGroundTruth {
    fn new(kernel: Kernel, bits: f64, alloc: &Allocation, x: &[f64]) -> Self {
        let (n, k) = (alloc.n, alloc.k);
        let mut serves = vec![0u64; n];
        let mut pieces = Vec::new();
        for f in Pattern::all(n) {
            if alloc.y[f.index()] <= 0.0 {
                continue;
            }
            // Segment boundaries of every AP in F.
            let mut layouts: Vec<(usize, Vec<(f64, usize)>)> = Vec::new();
            let mut cuts = vec![0.0];
            for i in f.members() {
                let mut end = 0.0;
                let mut segs = Vec::new();
                for j in 0..k {
                    let v = x[x_index(n, k, i, j, f)];
                    if v > 0.0 {
                        serves[i] |= 1 << j;
                        end += v;
                        segs.push((end, j));
                        cuts.push(end);
                    }
                }
                layouts.push((i, segs));
            }
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
            let mut list = Vec::new();
            for w in cuts.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                let mid = 0.5 * (lo + hi);
                let owners: Vec<(usize, usize)> = layouts
                    .iter()
                    .filter_map(|(i, segs)| segs.iter().find(|&&(end, _)| mid < end).map(|&(_, j)| (*i, j)))
                    .collect();
                if !owners.is_empty() {
                    list.push((hi - lo, owners));
                }
            }
            pieces.push((f, list));
        }
        let time = Pattern::all(n)
            .filter(|t| alloc.z[t.index()] > 0.0)
            .map(|t| (t, alloc.z[t.index()]))
            .collect();
        FlexGroundTruth { kernel, bits, serves, time, pieces }
    }

    fn rates(&self, nonempty: u64, out: &mut [f64]) {
        let busy = Pattern::from_members((0..self.serves.len()).filter(|&i| self.serves[i] & nonempty != 0));
        let free = self.kernel.graph.free(busy);
        for (_, list) in &self.pieces {
            for (width, owners) in list {
                let talking: Vec<(usize, usize)> =
                    owners.iter().copied().filter(|&(_, j)| nonempty & (1 << j) != 0).collect();
                for &(t, zt) in &self.time {
                    let allowed = t.union(free);
                    let active = Pattern::from_members(talking.iter().map(|&(i, _)| i).filter(|&i| allowed.contains(i)));
                    for &(i, j) in &talking {
                        if active.contains(i) {
                            out[j] += self.bits * width * zt * self.kernel.eff.get(i, j, active);
                        }
                    }
                }
            }
        }
    }
}

/// Bit-rates per queue for a given set of nonempty queues.
pub fn instantaneous_rates(scenario: &Scenario, alloc: &Allocation, nonempty: &[bool]) -> Result<Vec<f64>> {
    let mut model = RateModel::new(scenario, alloc)?;
    if nonempty.len() != model.n_queues() {
        return Err(Error::InvalidAllocation(format!(
            "busy state has {} entries, expected {}",
            nonempty.len(),
            model.n_queues()
        )));
    }
    let mask = nonempty.iter().enumerate().filter(|(_, &b)| b).fold(0u64, |m, (q, _)| m | 1 << q);
    Ok(model.rates(mask).to_vec())
}

struct Packet {
    id: u64,
    arrival: f64,
    work: f64,
    remaining: f64,
}

/// Arrival rate per simulated queue.
fn sim_lambdas(scenario: &Scenario) -> Vec<f64> {
    crate::allocators::queue_lambdas(scenario)
}

pub fn simulate(scenario: &Scenario, alloc: &Allocation, opts: &SimOptions) -> Result<SimResult> {
    let mut model = RateModel::new(scenario, alloc)?;
    let lambda = sim_lambdas(scenario);
    let nq = lambda.len();
    if lambda.iter().all(|&l| l <= 0.0) || opts.n_packets == 0 {
        return Ok(SimResult {
            report: DelayReport::empty(nq, DelaySource::Simulated),
            bits_served: 0.0,
            bits_accounted: 0.0,
            end_time_s: 0.0,
            events: 0,
        });
    }
    let warmup = ((opts.n_packets as f64 * opts.warmup_fraction).floor() as u64).min(opts.n_packets - 1);
    let measured = opts.n_packets - warmup;
    let batches = opts.batches.max(1).min(measured as usize);

    // One stream per queue, so two allocations simulated with the same seed
    // see the same arrivals and packet sizes.
    let mut rngs: Vec<ChaCha8Rng> = (0..lambda.len())
        .map(|q| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
            r.set_stream(q as u64);
            r
        })
        .collect();
    let work_dist = Exp::new(1.0 / scenario.mean_packet_bits).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let gaps: Vec<Option<Exp<f64>>> = lambda.iter().map(|&l| (l > 0.0).then(|| Exp::new(l).expect("positive rate"))).collect();
    let mut next_arrival: Vec<f64> =
        gaps.iter().zip(&mut rngs).map(|(g, rng)| g.as_ref().map_or(f64::INFINITY, |d| d.sample(rng))).collect();

    let mut queues: Vec<VecDeque<Packet>> = (0..nq).map(|_| VecDeque::new()).collect();
    let mut nonempty = 0u64;
    let mut clock = 0.0;
    let mut next_id = 0u64;
    let mut done = 0u64;
    let mut events = 0u64;
    let mut bits_served = 0.0;
    let mut bits_completed = 0.0;
    // Sums and counts per (batch, queue).
    let mut sums = vec![vec![0.0; nq]; batches];
    let mut counts = vec![vec![0u64; nq]; batches];

    while done < measured {
        events += 1;
        let rates = model.rates(nonempty);
        let mut t_next = f64::INFINITY;
        let mut completing = None;
        for (q, queue) in queues.iter().enumerate() {
            if let Some(head) = queue.front() {
                if rates[q] > 0.0 {
                    let t = clock + head.remaining.max(0.0) / rates[q];
                    if t < t_next {
                        t_next = t;
                        completing = Some(q);
                    }
                }
            }
        }
        let (arr_q, t_arr) = next_arrival
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one queue");
        if t_arr < t_next {
            t_next = t_arr;
            completing = None;
        }
        let dt = t_next - clock;
        for (q, queue) in queues.iter_mut().enumerate() {
            if let Some(head) = queue.front_mut() {
                let served = if completing == Some(q) { head.remaining } else { rates[q] * dt };
                head.remaining -= served;
                bits_served += served;
            }
        }
        clock = t_next;
        match completing {
            Some(q) => {
                let p = queues[q].pop_front().expect("completing queue is nonempty");
                bits_completed += p.work;
                if queues[q].is_empty() {
                    nonempty &= !(1 << q);
                }
                if p.id >= warmup && p.id < opts.n_packets {
                    let b = ((p.id - warmup) * batches as u64 / measured) as usize;
                    sums[b][q] += clock - p.arrival;
                    counts[b][q] += 1;
                    done += 1;
                }
            }
            None => {
                let q = arr_q;
                let work = work_dist.sample(&mut rngs[q]);
                queues[q].push_back(Packet { id: next_id, arrival: clock, work, remaining: work });
                next_id += 1;
                nonempty |= 1 << q;
                if queues[q].len() > opts.saturation_limit {
                    return Err(Error::Saturated { queue: q, limit: opts.saturation_limit });
                }
                next_arrival[q] = clock + gaps[q].as_ref().expect("arrivals only on loaded queues").sample(&mut rngs[q]);
            }
        }
    }
    let in_progress: f64 = queues.iter().filter_map(|q| q.front()).map(|p| p.work - p.remaining).sum();

    let report = build_report(&lambda, &sums, &counts, warmup);
    Ok(SimResult { report, bits_served, bits_accounted: bits_completed + in_progress, end_time_s: clock, events })
}

/// 95% half-width of the mean of independent `samples` by Student's t;
/// `None` for fewer than two samples.
pub fn half_width(samples: &[f64]) -> Option<f64> {
    let b = samples.len();
    if b < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / b as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (b - 1) as f64).ok()?.inverse_cdf(0.975);
    Some(t * (var / b as f64).sqrt())
}

fn build_report(lambda: &[f64], sums: &[Vec<f64>], counts: &[Vec<u64>], warmup: u64) -> DelayReport {
    let nq = lambda.len();
    let mut queues = Vec::with_capacity(nq);
    let mut means = vec![0.0; nq];
    for q in 0..nq {
        let n: u64 = counts.iter().map(|c| c[q]).sum();
        let s: f64 = sums.iter().map(|s| s[q]).sum();
        let batch_means: Vec<f64> =
            sums.iter().zip(counts).filter(|(_, c)| c[q] > 0).map(|(s, c)| s[q] / c[q] as f64).collect();
        means[q] = if n > 0 { s / n as f64 } else { 0.0 };
        queues.push(QueueDelay {
            queue: q,
            lambda: lambda[q],
            mean_s: means[q],
            ci_half_width_s: if n > 0 { half_width(&batch_means) } else { None },
            packets: n,
        });
    }
    // Network mean per batch over the queues seen in that batch.
    let batch_network: Vec<f64> = sums
        .iter()
        .zip(counts)
        .filter_map(|(s, c)| {
            let seen: Vec<usize> = (0..nq).filter(|&q| c[q] > 0).collect();
            let l: Vec<f64> = seen.iter().map(|&q| lambda[q]).collect();
            let d: Vec<f64> = seen.iter().map(|&q| s[q] / c[q] as f64).collect();
            (!seen.is_empty()).then(|| network_mean(&l, &d))
        })
        .collect();
    let measured: Vec<(f64, f64)> =
        queues.iter().filter(|q| q.packets > 0).map(|q| (q.lambda, q.mean_s)).collect();
    let (l, d): (Vec<f64>, Vec<f64>) = measured.into_iter().unzip();
    DelayReport {
        source: DelaySource::Simulated,
        network_mean_s: network_mean(&l, &d),
        network_ci_s: half_width(&batch_network),
        packets_served: queues.iter().map(|q| q.packets).sum(),
        warmup_discarded: warmup,
        queues,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::pattern::pattern_count;

    fn one_ap(rate: f64, lambda: f64) -> (Scenario, Allocation) {
        let s = corpus::single_ap(rate, lambda);
        let a = Allocation::slow_only(vec![0.0, 1.0]);
        (s, a)
    }

    #[test]
    fn mm1_mean_delay() {
        let (s, a) = one_ap(2.0, 1.0);
        let r = simulate(&s, &a, &SimOptions { n_packets: 200_000, ..Default::default() }).unwrap();
        let d = r.report.network_mean_s;
        assert!((d - 1.0).abs() < 0.05, "{d}");
        assert!(r.report.network_ci_s.unwrap() < 0.05);
        assert!(((r.bits_served - r.bits_accounted) / r.bits_accounted).abs() < 1e-9);
    }

    #[test]
    fn no_traffic_gives_empty_report() {
        let (s, a) = one_ap(2.0, 0.0);
        let r = simulate(&s, &a, &SimOptions::default()).unwrap();
        assert_eq!(r.report.packets_served, 0);
        assert_eq!(r.report.network_mean_s, 0.0);
    }

    #[test]
    fn same_seed_same_report() {
        let (s, a) = one_ap(2.0, 1.5);
        let o = SimOptions { n_packets: 20_000, seed: 9, ..Default::default() };
        assert_eq!(simulate(&s, &a, &o).unwrap(), simulate(&s, &a, &o).unwrap());
    }

    #[test]
    fn overload_saturates() {
        let (s, a) = one_ap(1.0, 2.0);
        let o = SimOptions { n_packets: 100_000, saturation_limit: 500, ..Default::default() };
        assert!(matches!(simulate(&s, &a, &o), Err(Error::Saturated { .. })));
    }

    #[test]
    fn empty_busy_set_has_zero_rates() {
        let s = corpus::random_fixed(3, 2, &corpus::Layout::default());
        let a = Allocation::full_reuse(3, 3);
        assert_eq!(instantaneous_rates(&s, &a, &[false; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn flex_ground_truth_matches_fixed_rates_on_one_group_per_ap() {
        let s = corpus::random_fixed(3, 4, &corpus::Layout::default());
        let mut y = vec![0.1; 8];
        y[0] = 0.0;
        y[7] = 0.4;
        let mut z = vec![0.0; 8];
        z[1] = 0.3;
        z[6] = 0.2;
        z[7] = 0.5;
        let fixed = Allocation { n: 3, k: 3, y, z, x: None };
        let flex_alloc = fixed.clone().with_fixed_split(s.group_of_ap().unwrap());
        let mut flex_s = s.clone();
        flex_s.association = Association::Flexible;
        for mask in 0..8u64 {
            let busy: Vec<bool> = (0..3).map(|q| mask & (1 << q) != 0).collect();
            let a = instantaneous_rates(&s, &fixed, &busy).unwrap();
            let b = instantaneous_rates(&flex_s, &flex_alloc, &busy).unwrap();
            for q in 0..3 {
                assert!((a[q] - b[q]).abs() <= 1e-9 * a[q].max(1.0), "mask {mask} q {q}: {} vs {}", a[q], b[q]);
            }
        }
    }

    #[test]
    fn flex_segments_follow_hand_enumeration() {
        // One AP alone, two groups splitting the single pattern 0.25 / 0.75.
        let mut s = corpus::random_flexible(1, 2, 3, &corpus::Layout::default());
        s.association = Association::Flexible;
        let a = Allocation { n: 1, k: 2, y: vec![0.0, 1.0], z: vec![0.0, 1.0], x: Some(vec![0.0, 0.25, 0.0, 0.75]) };
        let kernel = Kernel::new(&s).unwrap();
        let full = Pattern::singleton(0);
        let l = s.mean_packet_bits;
        let r = instantaneous_rates(&s, &a, &[true, false]).unwrap();
        assert!((r[0] - l * 0.25 * kernel.eff.get(0, 0, full)).abs() < 1e-6);
        assert_eq!(r[1], 0.0);
        let r = instantaneous_rates(&s, &a, &[true, true]).unwrap();
        assert!((r[1] - l * 0.75 * kernel.eff.get(0, 1, full)).abs() < 1e-6);
    }

    #[test]
    fn two_segments_interfere_only_where_they_overlap() {
        // AP 0 splits pattern {0,1} as group0 | group1, AP 1 gives it all to group1.
        let s = {
            let mut s = corpus::random_flexible(2, 2, 5, &corpus::Layout::default());
            s.neighbors = vec![Pattern::EMPTY; 2];
            s
        };
        let np = pattern_count(2);
        let mut x = vec![0.0; 2 * 2 * np];
        x[x_index(2, 2, 0, 0, Pattern::full(2))] = 0.5;
        x[x_index(2, 2, 0, 1, Pattern::full(2))] = 0.5;
        x[x_index(2, 2, 1, 1, Pattern::full(2))] = 1.0;
        let a = Allocation { n: 2, k: 2, y: vec![0.0, 0.0, 0.0, 1.0], z: vec![0.0, 0.0, 0.0, 1.0], x: Some(x) };
        let kernel = Kernel::new(&s).unwrap();
        let l = s.mean_packet_bits;
        let both = Pattern::full(2);
        // Only group 0 has data: AP 1 is silent everywhere.
        let r = instantaneous_rates(&s, &a, &[true, false]).unwrap();
        assert!((r[0] - l * 0.5 * kernel.eff.get(0, 0, Pattern::singleton(0))).abs() < 1e-6);
        // Both: group 0's half overlaps AP 1's transmission; group 1 gets AP 0's
        // second half and all of AP 1, both under mutual interference.
        let r = instantaneous_rates(&s, &a, &[true, true]).unwrap();
        assert!((r[0] - l * 0.5 * kernel.eff.get(0, 0, both)).abs() < 1e-6);
        let g1 = 0.5 * kernel.eff.get(0, 1, both) + kernel.eff.get(1, 1, both);
        assert!((r[1] - l * g1).abs() < 1e-6);
    }
}
