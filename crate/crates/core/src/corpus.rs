//! Reproducible scenario generators used by the tests, benchmarks and the
//! CLI's `generate` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pattern::Pattern;
use crate::scenario::{AccessPoint, Association, Scenario, UeGroup};

/// Radio and layout parameters shared by the generators.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// APs are dropped uniformly in a square of this side, meters.
    pub side_m: f64,
    /// Smallest AP-to-AP distance when dropping APs.
    pub min_ap_spacing_m: f64,
    /// UE groups fall in an annulus around their AP.
    pub group_radius_m: (f64, f64),
    /// APs closer than this are neighbors.
    pub neighbor_radius_m: f64,
    pub bandwidth_hz: f64,
    pub mean_packet_bits: f64,
    pub pathloss_exponent: f64,
    pub psd: f64,
    pub noise_psd: f64,
    /// Arrival rate per UE group, packets/s.
    pub lambda: f64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            side_m: 120.0,
            min_ap_spacing_m: 25.0,
            group_radius_m: (5.0, 20.0),
            neighbor_radius_m: 70.0,
            bandwidth_hz: 1e6,
            mean_packet_bits: 1e5,
            pathloss_exponent: 3.5,
            psd: 1e-6,
            noise_psd: 4e-13,
            lambda: 5.0,
        }
    }
}

impl Layout {
    /// Tighter drop: groups sit farther out and APs closer together, so
    /// interference dominates and full reuse overloads some cell.
    pub fn dense() -> Self {
        Layout { side_m: 100.0, group_radius_m: (5.0, 25.0), ..Layout::default() }
    }
}

/// Seeds of the standard three-AP corpus.
pub const THREE_AP_SEEDS: [u64; 3] = [1, 2, 3];

/// Load multipliers the three-AP corpus is swept over.
pub const THREE_AP_LOADS: [f64; 6] = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0];

/// Three APs on the default layout, one group each, every seed and load of
/// the standard corpus.
pub fn three_ap_corpus() -> Vec<Scenario> {
    let l = Layout::default();
    THREE_AP_SEEDS
        .iter()
        .flat_map(|&seed| {
            let base = random_fixed(3, seed, &l);
            THREE_AP_LOADS.iter().map(move |&m| base.scaled_load(m))
        })
        .collect()
}

/// Eight APs on the dense layout with one randomly placed group each, the
/// cluster used for delay-versus-load sweeps. At multiplier 1 every group
/// offers 5 packets/s.
pub fn eight_ap_cluster(seed: u64) -> Scenario {
    random_fixed(8, seed, &Layout::dense())
}

/// Seed of the eight-AP cluster used by the sweep tests and the README.
pub const EIGHT_AP_SEED: u64 = 2;

fn neighbors_within(aps: &[AccessPoint], radius: f64) -> Vec<Pattern> {
    (0..aps.len())
        .map(|a| {
            Pattern::from_members((0..aps.len()).filter(|&b| b != a && dist(aps[a].position, aps[b].position) < radius))
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn ap(i: usize, position: [f64; 2], psd: f64) -> AccessPoint {
    AccessPoint { id: format!("ap{}", i + 1), position, psd }
}

fn group(j: usize, position: [f64; 2], lambda: f64, noise_psd: f64) -> UeGroup {
    UeGroup { id: format!("ue{}", j + 1), position, lambda, noise_psd }
}

fn assemble(layout: &Layout, aps: Vec<AccessPoint>, groups: Vec<UeGroup>, association: Association) -> Scenario {
    let shadow = vec![vec![1.0; groups.len()]; aps.len()];
    Scenario {
        neighbors: neighbors_within(&aps, layout.neighbor_radius_m),
        aps,
        groups,
        bandwidth_hz: layout.bandwidth_hz,
        mean_packet_bits: layout.mean_packet_bits,
        pathloss_exponent: layout.pathloss_exponent,
        shadow,
        association,
    }
}

/// One AP whose solo rate is `rate_pps` packets/s, serving one group.
pub fn single_ap(rate_pps: f64, lambda: f64) -> Scenario {
    // W/L = 1 packet/s per bit/s/Hz, unit distance, SNR = 2^rate - 1.
    let snr = 2f64.powf(rate_pps) - 1.0;
    Scenario {
        aps: vec![ap(0, [0.0, 0.0], snr * 1e-9)],
        groups: vec![group(0, [1.0, 0.0], lambda, 1e-9)],
        bandwidth_hz: 1e6,
        mean_packet_bits: 1e6,
        pathloss_exponent: 3.0,
        neighbors: vec![Pattern::EMPTY],
        shadow: vec![vec![1.0]],
        association: Association::identity(1),
    }
}

/// `n` APs dropped at random, one UE group per AP placed around it.
pub fn random_fixed(n: usize, seed: u64, layout: &Layout) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aps = drop_aps(n, layout, &mut rng);
    let groups = (0..n)
        .map(|j| group(j, around(aps[j].position, layout, &mut rng), layout.lambda, layout.noise_psd))
        .collect();
    assemble(layout, aps, groups, Association::identity(n))
}

/// `n` APs dropped at random and `k` UE groups scattered over the area,
/// flexible association.
pub fn random_flexible(n: usize, k: usize, seed: u64, layout: &Layout) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aps = drop_aps(n, layout, &mut rng);
    let groups = (0..k)
        .map(|j| {
            let host = rng.gen_range(0..n);
            group(j, around(aps[host].position, layout, &mut rng), layout.lambda, layout.noise_psd)
        })
        .collect();
    assemble(layout, aps, groups, Association::Flexible)
}

/// APs on a line `spacing_m` apart, each group `group_offset_m` from its AP.
pub fn line(n: usize, spacing_m: f64, group_offset_m: f64, layout: &Layout) -> Scenario {
    let aps: Vec<AccessPoint> = (0..n).map(|i| ap(i, [i as f64 * spacing_m, 0.0], layout.psd)).collect();
    let groups = (0..n)
        .map(|j| group(j, [j as f64 * spacing_m, group_offset_m], layout.lambda, layout.noise_psd))
        .collect();
    assemble(layout, aps, groups, Association::identity(n))
}

fn drop_aps(n: usize, layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<AccessPoint> {
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut spacing = layout.min_ap_spacing_m;
    let mut tries = 0;
    while pos.len() < n {
        let p = [rng.gen_range(0.0..layout.side_m), rng.gen_range(0.0..layout.side_m)];
        if pos.iter().all(|&q| dist(p, q) >= spacing) {
            pos.push(p);
        }
        tries += 1;
        if tries % 1000 == 0 {
            spacing *= 0.9;
        }
    }
    pos.into_iter().enumerate().map(|(i, p)| ap(i, p, layout.psd)).collect()
}

fn around(center: [f64; 2], layout: &Layout, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let (lo, hi) = layout.group_radius_m;
    let r = rng.gen_range(lo..hi);
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    [center[0] + r * t.cos(), center[1] + r * t.sin()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::EffTable;

    #[test]
    fn single_ap_has_requested_rate() {
        let s = single_ap(2.0, 1.0);
        let t = EffTable::build(&s).unwrap();
        assert!((t.served(0, Pattern::singleton(0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generators_are_deterministic_and_valid() {
        let l = Layout::default();
        let a = random_fixed(5, 7, &l);
        assert_eq!(a, random_fixed(5, 7, &l));
        a.validate().unwrap();
        random_flexible(3, 6, 1, &l).validate().unwrap();
        line(4, 40.0, 10.0, &l).validate().unwrap();
        eight_ap_cluster(EIGHT_AP_SEED).validate().unwrap();
        assert_eq!(three_ap_corpus().len(), THREE_AP_SEEDS.len() * THREE_AP_LOADS.len());
    }
}
