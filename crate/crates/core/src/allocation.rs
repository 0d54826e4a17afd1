//! The decision vector: spectrum fractions `y`, time fractions `z` and, under
//! flexible association, the per-link spectrum splits `x`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{pattern_count, Pattern};
use crate::scenario::{Association, Scenario};

/// Flat index of `x^{i->j}_F` in an `n x k x 2^n` array.
#[inline]
pub fn x_index(n: usize, k: usize, i: usize, j: usize, f: Pattern) -> usize {
    ((i * k + j) << n) + f.index()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub n: usize,
    pub k: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub x: Option<Vec<f64>>,
}

/// Tolerance on `Σ y = 1` and the `x`/`y` coupling when validating files.
pub const SUM_TOL: f64 = 1e-9;

impl Allocation {
    /// `y_N = 1`, `z_N = 1`.
    pub fn full_reuse(n: usize, k: usize) -> Self {
        let np = pattern_count(n);
        let mut y = vec![0.0; np];
        let mut z = vec![0.0; np];
        y[np - 1] = 1.0;
        z[np - 1] = 1.0;
        Allocation { n, k, y, z, x: None }
    }

    /// Fixed-association allocation with `z_N = 1`.
    pub fn slow_only(y: Vec<f64>) -> Self {
        let np = y.len();
        let n = np.trailing_zeros() as usize;
        let mut z = vec![0.0; np];
        z[np - 1] = 1.0;
        Allocation { n, k: n, y, z, x: None }
    }

    /// Spreads each AP's share of every pattern evenly over all UE groups.
    pub fn with_even_split(mut self) -> Self {
        let (n, k) = (self.n, self.k);
        let mut x = vec![0.0; n * k * pattern_count(n)];
        for f in Pattern::all(n) {
            for i in f.members() {
                for j in 0..k {
                    x[x_index(n, k, i, j, f)] = self.y[f.index()] / k as f64;
                }
            }
        }
        self.x = Some(x);
        self
    }

    /// Under fixed association, `x^{i->g(i)}_F = y_F`.
    pub fn with_fixed_split(mut self, group_of_ap: &[usize]) -> Self {
        let (n, k) = (self.n, self.k);
        let mut x = vec![0.0; n * k * pattern_count(n)];
        for f in Pattern::all(n) {
            for i in f.members() {
                x[x_index(n, k, i, group_of_ap[i], f)] = self.y[f.index()];
            }
        }
        self.x = Some(x);
        self
    }

    #[inline]
    pub fn x(&self, i: usize, j: usize, f: Pattern) -> f64 {
        self.x
            .as_ref()
            .map_or(0.0, |x| x[x_index(self.n, self.k, i, j, f)])
    }

    /// Checks distribution and coupling constraints against a scenario.
    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAllocation(m));
        let n = scenario.n_aps();
        let k = scenario.n_groups();
        let np = pattern_count(n);
        if self.n != n || self.y.len() != np || self.z.len() != np {
            return bad(format!("allocation is for {} APs, scenario has {n}", self.n));
        }
        for (name, v) in [("y", &self.y), ("z", &self.z)] {
            if v.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
                return bad(format!("{name} has negative or non-finite entries"));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return bad(format!("{name} sums to {s}, expected 1"));
            }
        }
        match (&scenario.association, &self.x) {
            (Association::Flexible, None) => bad("flexible association needs x".into()),
            (Association::Flexible, Some(x)) => {
                if self.k != k || x.len() != n * k * np {
                    return bad("x has the wrong shape".into());
                }
                if x.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
                    return bad("x has negative or non-finite entries".into());
                }
                for f in Pattern::all(n) {
                    for i in 0..n {
                        let s: f64 = (0..k).map(|j| x[x_index(n, k, i, j, f)]).sum();
                        let want = if f.contains(i) { self.y[f.index()] } else { 0.0 };
                        if (s - want).abs() > SUM_TOL {
                            return bad(format!("AP {i} splits pattern {f} into {s}, expected {want}"));
                        }
                    }
                }
                Ok(())
            }
            (Association::Fixed { .. }, _) => Ok(()),
        }
    }

    pub fn to_file(&self, scenario: &Scenario, method: &str) -> AllocationFile {
        let keyed = |v: &[f64]| -> BTreeMap<String, f64> {
            v.iter()
                .enumerate()
                .filter(|(_, &e)| e > 0.0)
                .map(|(f, &e)| (f.to_string(), e))
                .collect()
        };
        let x = self.x.as_ref().map(|_| {
            let mut out: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
            for i in 0..self.n {
                for j in 0..self.k {
                    for f in Pattern::all(self.n).filter(|f| f.contains(i)) {
                        let v = self.x(i, j, f);
                        if v > 0.0 {
                            out.entry(scenario.aps[i].id.clone())
                                .or_default()
                                .entry(scenario.groups[j].id.clone())
                                .or_default()
                                .insert(f.index().to_string(), v);
                        }
                    }
                }
            }
            out
        });
        AllocationFile {
            method: method.to_string(),
            n_aps: self.n,
            n_groups: self.k,
            y: keyed(&self.y),
            z: keyed(&self.z),
            x,
        }
    }
}

/// On-disk allocation. Pattern keys are decimal bitmask strings: bit `i`
/// (AP `i` in file order, zero based) set means the AP belongs to the pattern.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AllocationFile {
    #[serde(default)]
    pub method: String,
    pub n_aps: usize,
    pub n_groups: usize,
    pub y: BTreeMap<String, f64>,
    pub z: BTreeMap<String, f64>,
    /// AP id -> UE-group id -> pattern -> bandwidth fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>>,
}

impl AllocationFile {
    pub fn into_allocation(self, scenario: &Scenario) -> Result<Allocation> {
        let n = scenario.n_aps();
        let k = scenario.n_groups();
        if self.n_aps != n || self.n_groups != k {
            return Err(Error::InvalidAllocation(format!(
                "file is for {}x{} (APs x groups), scenario is {n}x{k}",
                self.n_aps, self.n_groups
            )));
        }
        let np = pattern_count(n);
        let parse_key = |key: &str| -> Result<Pattern> {
            let bits: u32 = key
                .parse()
                .map_err(|_| Error::InvalidAllocation(format!("bad pattern key {key:?}")))?;
            if bits as usize >= np {
                return Err(Error::InvalidAllocation(format!("pattern {bits} out of range")));
            }
            Ok(Pattern::from_bits(bits))
        };
        let dense = |m: &BTreeMap<String, f64>| -> Result<Vec<f64>> {
            let mut v = vec![0.0; np];
            for (key, &val) in m {
                v[parse_key(key)?.index()] = val;
            }
            Ok(v)
        };
        let y = dense(&self.y)?;
        let z = dense(&self.z)?;
        let x = match self.x {
            None => None,
            Some(map) => {
                let mut x = vec![0.0; n * k * np];
                for (ap, per_group) in &map {
                    let i = scenario
                        .aps
                        .iter()
                        .position(|a| &a.id == ap)
                        .ok_or_else(|| Error::InvalidAllocation(format!("unknown AP {ap}")))?;
                    for (ue, per_pattern) in per_group {
                        let j = scenario
                            .groups
                            .iter()
                            .position(|g| &g.id == ue)
                            .ok_or_else(|| Error::InvalidAllocation(format!("unknown UE group {ue}")))?;
                        for (key, &val) in per_pattern {
                            x[x_index(n, k, i, j, parse_key(key)?)] = val;
                        }
                    }
                }
                Some(x)
            }
        };
        let alloc = Allocation { n, k, y, z, x };
        alloc.validate(scenario)?;
        Ok(alloc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<AllocationFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
