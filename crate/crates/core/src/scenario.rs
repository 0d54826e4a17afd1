//! Network instance: APs, UE groups, link gains and the pattern-indexed
//! spectral-efficiency table that the rest of the crate consumes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{pattern_count, Pattern};

/// Largest AP count for which [`EffTable`] is built.
pub const EFF_TABLE_MAX_APS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct AccessPoint {
    pub id: String,
    pub position: [f64; 2],
    /// Transmit power spectral density, W/Hz.
    pub psd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UeGroup {
    pub id: String,
    pub position: [f64; 2],
    /// Poisson arrival rate, packets/s.
    pub lambda: f64,
    /// Receiver noise PSD, W/Hz.
    pub noise_psd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Association {
    /// One UE group per AP; `ap_of_group[j]` serves group `j`.
    Fixed {
        ap_of_group: Vec<usize>,
        group_of_ap: Vec<usize>,
    },
    Flexible,
}

impl Association {
    /// Builds a fixed association from the group -> AP map. The map must be a
    /// bijection; [`Scenario::validate`] checks that.
    pub fn fixed(ap_of_group: Vec<usize>) -> Self {
        let mut group_of_ap = vec![usize::MAX; ap_of_group.len()];
        for (j, &i) in ap_of_group.iter().enumerate() {
            if i < group_of_ap.len() {
                group_of_ap[i] = j;
            }
        }
        Association::Fixed {
            ap_of_group,
            group_of_ap,
        }
    }

    /// Group `j` served by AP `j`.
    pub fn identity(n: usize) -> Self {
        Association::fixed((0..n).collect())
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Association::Fixed { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub aps: Vec<AccessPoint>,
    pub groups: Vec<UeGroup>,
    pub bandwidth_hz: f64,
    pub mean_packet_bits: f64,
    pub pathloss_exponent: f64,
    /// Neighbor mask per AP; symmetric and irreflexive.
    pub neighbors: Vec<Pattern>,
    /// Fixed linear shadowing multiplier, `shadow[ap][group]`.
    pub shadow: Vec<Vec<f64>>,
    pub association: Association,
}

impl Scenario {
    pub fn n_aps(&self) -> usize {
        self.aps.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.lambda).collect()
    }

    /// Per-AP arrival rates under fixed association.
    pub fn ap_lambdas(&self) -> Result<Vec<f64>> {
        match &self.association {
            Association::Fixed { group_of_ap, .. } => {
                Ok(group_of_ap.iter().map(|&j| self.groups[j].lambda).collect())
            }
            Association::Flexible => Err(Error::AssociationMismatch(
                "per-AP loads need a fixed association".into(),
            )),
        }
    }

    pub fn group_of_ap(&self) -> Option<&[usize]> {
        match &self.association {
            Association::Fixed { group_of_ap, .. } => Some(group_of_ap),
            Association::Flexible => None,
        }
    }

    pub fn total_lambda(&self) -> f64 {
        self.groups.iter().map(|g| g.lambda).sum()
    }

    /// Copy with every arrival rate multiplied by `mult`.
    pub fn scaled_load(&self, mult: f64) -> Scenario {
        let mut s = self.clone();
        for g in &mut s.groups {
            g.lambda *= mult;
        }
        s
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].contains(b)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_aps();
        let k = self.n_groups();
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if n == 0 {
            return bad("at least one AP is required".into());
        }
        if k == 0 {
            return bad("at least one UE group is required".into());
        }
        if n > crate::pattern::MAX_APS {
            return Err(Error::PatternSpaceTooLarge {
                n,
                limit: crate::pattern::MAX_APS,
            });
        }
        for (i, ap) in self.aps.iter().enumerate() {
            if !(ap.psd > 0.0 && ap.psd.is_finite()) {
                return bad(format!("AP {i} has non-positive PSD {}", ap.psd));
            }
            if !ap.position.iter().all(|c| c.is_finite()) {
                return bad(format!("AP {i} has a non-finite position"));
            }
        }
        for (j, g) in self.groups.iter().enumerate() {
            if !(g.noise_psd > 0.0 && g.noise_psd.is_finite()) {
                return bad(format!("UE group {j} has non-positive noise PSD"));
            }
            if !(g.lambda >= 0.0 && g.lambda.is_finite()) {
                return bad(format!("UE group {j} has invalid arrival rate {}", g.lambda));
            }
            if !g.position.iter().all(|c| c.is_finite()) {
                return bad(format!("UE group {j} has a non-finite position"));
            }
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return bad("bandwidth must be positive".into());
        }
        if !(self.mean_packet_bits > 0.0 && self.mean_packet_bits.is_finite()) {
            return bad("mean packet length must be positive".into());
        }
        if !(self.pathloss_exponent >= 0.0 && self.pathloss_exponent.is_finite()) {
            return bad("path-loss exponent must be non-negative".into());
        }
        if self.neighbors.len() != n {
            return bad("neighbor list length must equal the AP count".into());
        }
        let universe = Pattern::full(n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            if !nb.is_subset_of(universe) {
                return bad(format!("AP {i} has an out-of-range neighbor"));
            }
            if nb.contains(i) {
                return bad(format!("AP {i} is listed as its own neighbor"));
            }
            for m in nb.members() {
                if !self.neighbors[m].contains(i) {
                    return bad(format!("neighbor relation {i}-{m} is not symmetric"));
                }
            }
        }
        if self.shadow.len() != n || self.shadow.iter().any(|row| row.len() != k) {
            return bad("shadow matrix must be n x k".into());
        }
        if self
            .shadow
            .iter()
            .flatten()
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return bad("shadow factors must be positive".into());
        }
        if let Association::Fixed {
            ap_of_group,
            group_of_ap,
        } = &self.association
        {
            if k != n || ap_of_group.len() != k || group_of_ap.len() != n {
                return bad("fixed association needs exactly one UE group per AP".into());
            }
            let mut seen = vec![false; n];
            for &i in ap_of_group {
                if i >= n || seen[i] {
                    return bad("fixed association map is not a bijection".into());
                }
                seen[i] = true;
            }
            for (i, &j) in group_of_ap.iter().enumerate() {
                if j >= k || ap_of_group[j] != i {
                    return bad("fixed association inverse map is inconsistent".into());
                }
            }
        }
        Ok(())
    }

    /// Linear power gain of the link AP `i` -> UE group `j`, log-distance
    /// model with 1 m reference distance.
    pub fn link_gain(&self, i: usize, j: usize) -> Result<f64> {
        let a = self.aps[i].position;
        let u = self.groups[j].position;
        let d = (a[0] - u[0]).hypot(a[1] - u[1]);
        if d == 0.0 {
            return Err(Error::DegenerateGeometry { ap: i, group: j });
        }
        Ok(self.shadow[i][j] * d.powf(-self.pathloss_exponent))
    }

    /// Shannon efficiency of AP `i` -> group `j` when exactly the APs in
    /// `active` transmit on the same spectrum, in packets/s over the whole band.
    pub fn spectral_efficiency(&self, i: usize, j: usize, active: Pattern) -> Result<f64> {
        if !active.contains(i) {
            return Ok(0.0);
        }
        let signal = self.aps[i].psd * self.link_gain(i, j)?;
        let mut interference = 0.0;
        for m in active.without(i).members() {
            interference += self.aps[m].psd * self.link_gain(m, j)?;
        }
        let sinr = signal / (interference + self.groups[j].noise_psd);
        Ok(self.bandwidth_hz / self.mean_packet_bits * (1.0 + sinr).log2())
    }

    pub fn from_json_str(text: &str) -> Result<Scenario> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        file.into_scenario()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Scenario> {
        Scenario::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScenarioFile::from(self))?)
    }
}

/// Spectral efficiencies `s[i][j][A]` for every AP, UE group and active set.
#[derive(Clone, Debug, PartialEq)]
pub struct EffTable {
    n: usize,
    k: usize,
    values: Vec<f64>,
    group_of_ap: Option<Vec<usize>>,
}

impl EffTable {
    pub fn build(scenario: &Scenario) -> Result<EffTable> {
        scenario.validate()?;
        let n = scenario.n_aps();
        let k = scenario.n_groups();
        if n > EFF_TABLE_MAX_APS {
            return Err(Error::PatternSpaceTooLarge {
                n,
                limit: EFF_TABLE_MAX_APS,
            });
        }
        let np = pattern_count(n);
        let scale = scenario.bandwidth_hz / scenario.mean_packet_bits;
        let mut values = vec![0.0; n * k * np];
        let mut received = vec![0.0; n];
        let mut total = vec![0.0; np];
        for j in 0..k {
            for (i, p) in received.iter_mut().enumerate() {
                *p = scenario.aps[i].psd * scenario.link_gain(i, j)?;
            }
            // total[A] = sum of received powers over A, built low bit first.
            for a in 1..np {
                let low = a.trailing_zeros() as usize;
                total[a] = total[a & (a - 1)] + received[low];
            }
            let noise = scenario.groups[j].noise_psd;
            for i in 0..n {
                let base = (i * k + j) * np;
                for a in Pattern::all(n).filter(|a| a.contains(i)) {
                    let interference = total[a.index()] - received[i];
                    let sinr = received[i] / (interference.max(0.0) + noise);
                    values[base + a.index()] = scale * (1.0 + sinr).log2();
                }
            }
        }
        Ok(EffTable {
            n,
            k,
            values,
            group_of_ap: scenario.group_of_ap().map(<[usize]>::to_vec),
        })
    }

    pub fn n_aps(&self) -> usize {
        self.n
    }

    pub fn n_groups(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, active: Pattern) -> f64 {
        self.values[((i * self.k + j) << self.n) + active.index()]
    }

    /// `s[i][A]` for the group AP `i` serves under fixed association.
    #[inline]
    pub fn served(&self, i: usize, active: Pattern) -> f64 {
        let j = self
            .group_of_ap
            .as_ref()
            .expect("served() requires a fixed association")[i];
        self.get(i, j, active)
    }

    pub fn group_of_ap(&self) -> Option<&[usize]> {
        self.group_of_ap.as_deref()
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Id {
    Num(u64),
    Str(String),
}

impl Id {
    fn key(&self) -> String {
        match self {
            Id::Num(n) => n.to_string(),
            Id::Str(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApRecord {
    pub id: Id,
    pub x: f64,
    pub y: f64,
    pub psd_w_per_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UeGroupRecord {
    pub id: Id,
    pub x: f64,
    pub y: f64,
    pub lambda_pps: f64,
    pub noise_psd_w_per_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub ap: Id,
    pub ue: Id,
    pub factor: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssociationRecord {
    /// UE-group id -> AP id.
    Fixed(BTreeMap<String, Id>),
    Flexible,
}

/// On-disk scenario document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub aps: Vec<ApRecord>,
    pub ue_groups: Vec<UeGroupRecord>,
    pub bandwidth_hz: f64,
    pub mean_packet_bits: f64,
    pub pathloss_exponent: f64,
    #[serde(default)]
    pub neighbors: Vec<(Id, Id)>,
    pub association: AssociationRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shadow: Vec<ShadowRecord>,
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let ap_index = index_ids(self.aps.iter().map(|a| &a.id), "AP")?;
        let ue_index = index_ids(self.ue_groups.iter().map(|g| &g.id), "UE group")?;
        let n = self.aps.len();
        let k = self.ue_groups.len();
        let lookup = |map: &HashMap<String, usize>, id: &Id, what: &str| {
            map.get(&id.key())
                .copied()
                .ok_or_else(|| Error::InvalidScenario(format!("unknown {what} id {}", id.key())))
        };

        let mut neighbors = vec![Pattern::EMPTY; n];
        for (a, b) in &self.neighbors {
            let ia = lookup(&ap_index, a, "AP")?;
            let ib = lookup(&ap_index, b, "AP")?;
            if ia == ib {
                return Err(Error::InvalidScenario(format!(
                    "AP {} cannot neighbor itself",
                    a.key()
                )));
            }
            neighbors[ia] = neighbors[ia].with(ib);
            neighbors[ib] = neighbors[ib].with(ia);
        }

        let mut shadow = vec![vec![1.0; k]; n];
        for rec in &self.shadow {
            let i = lookup(&ap_index, &rec.ap, "AP")?;
            let j = lookup(&ue_index, &rec.ue, "UE group")?;
            shadow[i][j] = rec.factor;
        }

        let association = match &self.association {
            AssociationRecord::Flexible => Association::Flexible,
            AssociationRecord::Fixed(map) => {
                let mut ap_of_group = vec![usize::MAX; k];
                for (ue, ap) in map {
                    let j = lookup(&ue_index, &Id::Str(ue.clone()), "UE group")?;
                    ap_of_group[j] = lookup(&ap_index, ap, "AP")?;
                }
                if ap_of_group.contains(&usize::MAX) {
                    return Err(Error::InvalidScenario(
                        "fixed association must map every UE group".into(),
                    ));
                }
                Association::fixed(ap_of_group)
            }
        };

        let scenario = Scenario {
            aps: self
                .aps
                .iter()
                .map(|a| AccessPoint {
                    id: a.id.key(),
                    position: [a.x, a.y],
                    psd: a.psd_w_per_hz,
                })
                .collect(),
            groups: self
                .ue_groups
                .iter()
                .map(|g| UeGroup {
                    id: g.id.key(),
                    position: [g.x, g.y],
                    lambda: g.lambda_pps,
                    noise_psd: g.noise_psd_w_per_hz,
                })
                .collect(),
            bandwidth_hz: self.bandwidth_hz,
            mean_packet_bits: self.mean_packet_bits,
            pathloss_exponent: self.pathloss_exponent,
            neighbors,
            shadow,
            association,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        let mut neighbors = Vec::new();
        for (i, nb) in s.neighbors.iter().enumerate() {
            for m in nb.members().filter(|&m| m > i) {
                neighbors.push((Id::Str(s.aps[i].id.clone()), Id::Str(s.aps[m].id.clone())));
            }
        }
        let mut shadow = Vec::new();
        for (i, row) in s.shadow.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                if f != 1.0 {
                    shadow.push(ShadowRecord {
                        ap: Id::Str(s.aps[i].id.clone()),
                        ue: Id::Str(s.groups[j].id.clone()),
                        factor: f,
                    });
                }
            }
        }
        let association = match &s.association {
            Association::Flexible => AssociationRecord::Flexible,
            Association::Fixed { ap_of_group, .. } => AssociationRecord::Fixed(
                ap_of_group
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| (s.groups[j].id.clone(), Id::Str(s.aps[i].id.clone())))
                    .collect(),
            ),
        };
        ScenarioFile {
            aps: s
                .aps
                .iter()
                .map(|a| ApRecord {
                    id: Id::Str(a.id.clone()),
                    x: a.position[0],
                    y: a.position[1],
                    psd_w_per_hz: a.psd,
                })
                .collect(),
            ue_groups: s
                .groups
                .iter()
                .map(|g| UeGroupRecord {
                    id: Id::Str(g.id.clone()),
                    x: g.position[0],
                    y: g.position[1],
                    lambda_pps: g.lambda,
                    noise_psd_w_per_hz: g.noise_psd,
                })
                .collect(),
            bandwidth_hz: s.bandwidth_hz,
            mean_packet_bits: s.mean_packet_bits,
            pathloss_exponent: s.pathloss_exponent,
            neighbors,
            association,
            shadow,
        }
    }
}

fn index_ids<'a>(ids: impl Iterator<Item = &'a Id>, what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (idx, id) in ids.enumerate() {
        if map.insert(id.key(), idx).is_some() {
            return Err(Error::InvalidScenario(format!("duplicate {what} id {}", id.key())));
        }
    }
    Ok(map)
}
