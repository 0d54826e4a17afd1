//! Fast-timescale opportunistic scheduling.
//!
//! A busy AP transmits on PRB `(F, T)` when it holds the spectrum (`i ∈ F`)
//! and either owns the time slot (`i ∈ T`) or none of its neighbors is busy.
//! Everything here is a pure function of `(F, T, busy)`; the η tensors are
//! never materialized, only their linear collapses over one of the two
//! pattern axes.

use crate::error::{Error, Result};
use crate::pattern::{pattern_count, Pattern};
use crate::scenario::{EffTable, Scenario};

/// Neighbor relation plus the cached "all neighbors idle" set for every busy set.
#[derive(Clone, Debug)]
pub struct NeighborGraph {
    n: usize,
    neighbors: Vec<Pattern>,
    free: Vec<Pattern>,
}

impl NeighborGraph {
    pub fn new(neighbors: &[Pattern]) -> Self {
        let n = neighbors.len();
        let free = Pattern::all(n)
            .map(|busy| {
                Pattern::from_members((0..n).filter(|&l| neighbors[l].intersect(busy).is_empty()))
            })
            .collect();
        NeighborGraph {
            n,
            neighbors: neighbors.to_vec(),
            free,
        }
    }

    pub fn n_aps(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> Pattern {
        self.neighbors[i]
    }

    /// APs none of whose neighbors are in `busy`.
    #[inline]
    pub fn free(&self, busy: Pattern) -> Pattern {
        self.free[busy.index()]
    }
}

/// APs actually transmitting on PRB `(f, t)` when `busy` have data.
#[inline]
pub fn active_set(f: Pattern, t: Pattern, busy: Pattern, graph: &NeighborGraph) -> Pattern {
    f.intersect(busy).intersect(t.union(graph.free(busy)))
}

/// Active set seen by server `i` of a UE group on PRB `(f, t)` when `interferers`
/// are busy. The server counts as busy; neighbors are checked against the whole
/// busy set, the same predicate [`active_set`] uses.
pub fn active_set_flex(
    i: usize,
    f: Pattern,
    t: Pattern,
    interferers: Pattern,
    graph: &NeighborGraph,
) -> Result<Pattern> {
    if !f.contains(i) {
        return Err(Error::ServerLacksPattern { ap: i, pattern: f });
    }
    Ok(flex_active_unchecked(i, f, t, interferers, graph))
}

#[inline]
fn flex_active_unchecked(
    i: usize,
    f: Pattern,
    t: Pattern,
    interferers: Pattern,
    graph: &NeighborGraph,
) -> Pattern {
    let busy = interferers.with(i);
    f.intersect(busy).intersect(t.union(graph.free(busy)))
}

/// Spectral efficiency table plus neighbor graph: everything needed to
/// evaluate η for a scenario.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub eff: EffTable,
    pub graph: NeighborGraph,
}

impl Kernel {
    pub fn new(scenario: &Scenario) -> Result<Kernel> {
        Ok(Kernel {
            eff: EffTable::build(scenario)?,
            graph: NeighborGraph::new(&scenario.neighbors),
        })
    }

    pub fn n_aps(&self) -> usize {
        self.eff.n_aps()
    }

    pub fn n_groups(&self) -> usize {
        self.eff.n_groups()
    }

    /// η^i_{F,T,A} under fixed association.
    #[inline]
    pub fn eta_fixed(&self, i: usize, f: Pattern, t: Pattern, busy: Pattern) -> f64 {
        self.eff.served(i, active_set(f, t, busy, &self.graph))
    }

    /// η^{i->j}_{F,T,I} under flexible association.
    pub fn eta_flex(&self, i: usize, j: usize, f: Pattern, t: Pattern, interferers: Pattern) -> Result<f64> {
        let c = active_set_flex(i, f, t, interferers, &self.graph)?;
        Ok(self.eff.get(i, j, c))
    }

    /// `M[i][F][A] = Σ_T η^i_{F,T,A} z_T`.
    pub fn collapse_over_time(&self, z: &[f64]) -> Collapsed {
        let n = self.n_aps();
        let np = pattern_count(n);
        let support = support(z);
        let mut m = Collapsed::zeros(n, np, np);
        for i in 0..n {
            for f in Pattern::all(n).filter(|f| f.contains(i)) {
                for a in Pattern::all(n).filter(|a| a.contains(i)) {
                    let free = self.graph.free(a);
                    let fa = f.intersect(a);
                    let v: f64 = support
                        .iter()
                        .map(|&(t, zt)| zt * self.eff.served(i, fa.intersect(t.union(free))))
                        .sum();
                    m.set(i, f.index(), a, v);
                }
            }
        }
        m
    }

    /// `M'[i][T][A] = Σ_F η^i_{F,T,A} y_F`.
    pub fn collapse_over_freq(&self, y: &[f64]) -> Collapsed {
        let n = self.n_aps();
        let np = pattern_count(n);
        let support: Vec<_> = support(y).into_iter().filter(|(f, _)| !f.is_empty()).collect();
        let mut m = Collapsed::zeros(n, np, np);
        for i in 0..n {
            for a in Pattern::all(n).filter(|a| a.contains(i)) {
                let free = self.graph.free(a);
                for t in Pattern::all(n) {
                    let tf = t.union(free);
                    let v: f64 = support
                        .iter()
                        .filter(|(f, _)| f.contains(i))
                        .map(|&(f, yf)| yf * self.eff.served(i, f.intersect(a).intersect(tf)))
                        .sum();
                    m.set(i, t.index(), a, v);
                }
            }
        }
        m
    }

    /// Flexible mode: `M[j][I][(i,F)] = Σ_T η^{i->j}_{F,T,I} z_T`, stored with
    /// the link `(i, F)` as column index `i * 2^n + F`.
    pub fn collapse_over_time_flex(&self, z: &[f64]) -> Collapsed {
        let n = self.n_aps();
        let k = self.n_groups();
        let np = pattern_count(n);
        let support = support(z);
        let mut m = Collapsed::zeros(k, n * np, np);
        for j in 0..k {
            for interferers in Pattern::all(n) {
                for i in 0..n {
                    let busy = interferers.with(i);
                    let free = self.graph.free(busy);
                    for f in Pattern::all(n).filter(|f| f.contains(i)) {
                        let fb = f.intersect(busy);
                        let v: f64 = support
                            .iter()
                            .map(|&(t, zt)| zt * self.eff.get(i, j, fb.intersect(t.union(free))))
                            .sum();
                        m.set(j, i * np + f.index(), interferers, v);
                    }
                }
            }
        }
        m
    }

    /// Flexible mode: `M'[j][T][I] = Σ_F Σ_i η^{i->j}_{F,T,I} x^{i->j}_F`.
    pub fn collapse_over_freq_flex(&self, x: &[f64]) -> Collapsed {
        let n = self.n_aps();
        let k = self.n_groups();
        let np = pattern_count(n);
        let mut m = Collapsed::zeros(k, np, np);
        for j in 0..k {
            let links: Vec<(usize, Pattern, f64)> = (0..n)
                .flat_map(|i| {
                    Pattern::all(n)
                        .filter(move |f| f.contains(i))
                        .map(move |f| (i, f))
                })
                .filter_map(|(i, f)| {
                    let v = x[crate::allocation::x_index(n, k, i, j, f)];
                    (v > 0.0).then_some((i, f, v))
                })
                .collect();
            for interferers in Pattern::all(n) {
                for t in Pattern::all(n) {
                    let v: f64 = links
                        .iter()
                        .map(|&(i, f, xv)| {
                            let c = flex_active_unchecked(i, f, t, interferers, &self.graph);
                            xv * self.eff.get(i, j, c)
                        })
                        .sum();
                    m.set(j, t.index(), interferers, v);
                }
            }
        }
        m
    }
}

/// Dense three-axis tensor `[queue][column][busy set]` produced by the collapses.
#[derive(Clone, Debug, PartialEq)]
pub struct Collapsed {
    columns: usize,
    sets: usize,
    data: Vec<f64>,
}

impl Collapsed {
    fn zeros(queues: usize, columns: usize, sets: usize) -> Self {
        Collapsed {
            columns,
            sets,
            data: vec![0.0; queues * columns * sets],
        }
    }

    #[inline]
    fn set(&mut self, q: usize, col: usize, busy: Pattern, v: f64) {
        self.data[(q * self.columns + col) * self.sets + busy.index()] = v;
    }

    #[inline]
    pub fn get(&self, q: usize, col: usize, busy: Pattern) -> f64 {
        self.data[(q * self.columns + col) * self.sets + busy.index()]
    }

    pub fn columns(&self) -> usize {
        self.columns
    }
}

fn support(dist: &[f64]) -> Vec<(Pattern, f64)> {
    dist.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(t, &v)| (Pattern::from_bits(t as u32), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(members: &[usize]) -> Pattern {
        Pattern::from_members(members.iter().copied())
    }

    fn pair() -> NeighborGraph {
        NeighborGraph::new(&[p(&[1]), p(&[0])])
    }

    #[test]
    fn active_set_examples() {
        let g = pair();
        assert_eq!(active_set(p(&[0, 1]), p(&[0]), p(&[0, 1]), &g), p(&[0]));
        assert_eq!(active_set(p(&[0, 1]), p(&[0]), p(&[1]), &g), p(&[1]));
        assert_eq!(active_set(p(&[0, 1]), p(&[0]), Pattern::EMPTY, &g), Pattern::EMPTY);
    }

    #[test]
    fn full_time_pattern_disables_opportunism() {
        let g = NeighborGraph::new(&[p(&[1, 2]), p(&[0]), p(&[0])]);
        for f in Pattern::all(3) {
            for a in Pattern::all(3) {
                assert_eq!(active_set(f, Pattern::full(3), a, &g), f.intersect(a));
            }
        }
    }

    #[test]
    fn flex_active_set_examples() {
        let g = pair();
        // lone server in its own slot
        assert_eq!(active_set_flex(0, p(&[0, 1]), p(&[0]), Pattern::EMPTY, &g).unwrap(), p(&[0]));
        // lone server outside its slot: no busy neighbor, transmits anyway
        assert_eq!(active_set_flex(0, p(&[0, 1]), p(&[1]), Pattern::EMPTY, &g).unwrap(), p(&[0]));
        // busy neighbor owns the slot, server is blocked
        let c = active_set_flex(0, p(&[0, 1]), p(&[1]), p(&[1]), &g).unwrap();
        assert!(!c.contains(0));
        assert!(matches!(
            active_set_flex(0, p(&[1]), p(&[0]), Pattern::EMPTY, &g),
            Err(Error::ServerLacksPattern { ap: 0, .. })
        ));
    }

    #[test]
    fn free_set_matches_definition() {
        let nb = [p(&[1]), p(&[0, 2]), p(&[1]), Pattern::EMPTY];
        let g = NeighborGraph::new(&nb);
        for busy in Pattern::all(4) {
            for l in 0..4 {
                assert_eq!(g.free(busy).contains(l), nb[l].intersect(busy).is_empty());
            }
        }
    }
}
