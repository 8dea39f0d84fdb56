use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rule_rewards::{normalize_unit, unit_consistency_reward};

pub const STANDARD_V1: &str = "standard-v1";

/// Sentinel category for labels that fit nowhere.
pub const NONE: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub members: Vec<String>,
    /// Reference problem count, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOntology {
    pub version: String,
    pub clusters: Vec<Cluster>,
}

const STANDARD_CLUSTERS: [(&str, usize); 26] = [
    ("Length / Distance", 759),
    ("Speed / Velocity", 200),
    ("Time", 117),
    ("Energy", 305),
    ("Force", 208),
    ("Frequency / Angular Frequency", 149),
    ("Angle", 151),
    ("Acceleration", 33),
    ("Pressure", 53),
    ("Mass / Momentum", 79),
    ("Voltage / Electric Potential", 91),
    ("Electric Field / Flux", 71),
    ("Electric Current", 53),
    ("Resistance", 19),
    ("Power / Intensity (W)", 85),
    ("Temperature", 62),
    ("Magnetic Field / Flux", 46),
    ("Electric Charge / Charge Density", 53),
    ("Capacitance / Inductance", 19),
    ("Torque / Rotational Mechanics", 17),
    ("Dimensionless / Ratios / Counts", 226),
    ("Thermodynamics / Heat / Entropy", 65),
    ("Optics (wavelength, magnification, refractive index)", 85),
    ("Sound / Decibel / Acoustic Intensity", 20),
    ("Nuclear & Particle Physics", 30),
    ("Quantum Mechanics / Action", 10),
];

pub(crate) fn label_key(s: &str) -> String {
    normalize_unit(s)
}

impl UnitOntology {
    /// The shipped 26-cluster unit table. Each cluster's only member is its
    /// own name.
    pub fn standard_v1() -> Self {
        Self {
            version: STANDARD_V1.into(),
            clusters: STANDARD_CLUSTERS
                .iter()
                .map(|&(name, count)| Cluster {
                    name: name.into(),
                    members: vec![name.into()],
                    count: Some(count),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeMap::new();
        let mut owners: BTreeMap<String, &str> = BTreeMap::new();
        for c in &self.clusters {
            if c.name.trim().is_empty() {
                return contract("ontology cluster with an empty name");
            }
            if label_key(&c.name) == NONE {
                return contract("\"none\" is reserved and cannot name a cluster");
            }
            if names.insert(label_key(&c.name), ()).is_some() {
                return contract(format!("duplicate cluster name {:?}", c.name));
            }
            for m in &c.members {
                if let Some(prev) = owners.insert(label_key(m), &c.name) {
                    if prev != c.name {
                        return contract(format!(
                            "label {m:?} belongs to both {prev:?} and {:?}",
                            c.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().map(|c| c.name.as_str())
    }

    /// Cluster owning `label` (by name or member), compared after unit
    /// normalization.
    pub fn cluster_of(&self, label: &str) -> Option<&str> {
        let key = label_key(label);
        self.clusters
            .iter()
            .find(|c| label_key(&c.name) == key || c.members.iter().any(|m| label_key(m) == key))
            .map(|c| c.name.as_str())
    }

    /// Exact cluster name for `label`, ignoring case and spacing.
    pub fn canonical_name(&self, label: &str) -> Option<&str> {
        let key = label_key(label);
        self.names().find(|n| label_key(n) == key)
    }

    pub fn total_members(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let o: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        o.validate()?;
        Ok(o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

impl Default for UnitOntology {
    fn default() -> Self {
        Self::standard_v1()
    }
}

/// Groups of interchangeable unit spellings, applied before unit matching.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitAliases {
    pub groups: Vec<Vec<String>>,
}

impl UnitAliases {
    /// A small table of common SI spellings.
    pub fn common() -> Self {
        let g = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            groups: vec![
                g(&["m/s", "meters per second", "metres per second", "m s^-1"]),
                g(&["m/s^2", "m/s²", "meters per second squared", "metres per second squared"]),
                g(&["m", "meter", "meters", "metre", "metres"]),
                g(&["s", "second", "seconds", "sec"]),
                g(&["kg", "kilogram", "kilograms"]),
                g(&["n", "newton", "newtons"]),
                g(&["j", "joule", "joules"]),
                g(&["w", "watt", "watts"]),
                g(&["v", "volt", "volts"]),
                g(&["a", "ampere", "amperes", "amp", "amps"]),
                g(&["hz", "hertz"]),
                g(&["pa", "pascal", "pascals"]),
                g(&["k", "kelvin"]),
                g(&["c", "coulomb", "coulombs"]),
                g(&["t", "tesla"]),
                g(&["ev", "electron volt", "electron volts", "electronvolt"]),
                g(&["°", "deg", "degree", "degrees"]),
                g(&["rad", "radian", "radians"]),
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `unit` followed by every alias of it, normalized.
    pub fn expand(&self, unit: &str) -> Vec<String> {
        let key = normalize_unit(unit);
        let mut out = vec![key.clone()];
        for group in &self.groups {
            if group.iter().any(|a| normalize_unit(a) == key) {
                for a in group {
                    let a = normalize_unit(a);
                    if !out.contains(&a) {
                        out.push(a);
                    }
                }
            }
        }
        out
    }

    /// Unit consistency after expanding both sides through the table.
    pub fn unit_reward(&self, predicted: &str, gold: &str) -> f64 {
        let golds = self.expand(gold);
        let hit = self
            .expand(predicted)
            .iter()
            .any(|p| golds.iter().any(|g| unit_consistency_reward(p, g) == 1.0));
        if hit {
            1.0
        } else {
            0.0
        }
    }
}
