//! Subsystem decomposition of the state and the 0/1 interconnection matrix `M`
//! with `[w₁; …; w_N] = M·x`.
//!
//! Coordinates are 0-based in code and 1-based in the JSON topology format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsystemSpec {
    pub index: usize,
    /// Global coordinates forming this subsystem's state, in order.
    pub state_coords: Vec<usize>,
    /// Global coordinates feeding the internal input `wᵢ`, in order.
    pub input_coords: Vec<usize>,
}

impl SubsystemSpec {
    pub fn new(state_coords: Vec<usize>, input_coords: Vec<usize>) -> Self {
        Self {
            index: 0,
            state_coords,
            input_coords,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_coords.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_coords.len()
    }
}

/// Validated decomposition. Subsystems are ordered by their smallest state
/// coordinate; rows of `M` are grouped by subsystem in that order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TopologyConfig", try_from = "TopologyConfig")]
pub struct InterconnectionSpec {
    n: usize,
    subsystems: Vec<SubsystemSpec>,
}

/// Topology file: `{ "n": int, "subsystems": [ { "states": [..], "inputs": [..] } ] }`,
/// coordinates 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub n: usize,
    pub subsystems: Vec<SubsystemConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemConfig {
    pub states: Vec<usize>,
    #[serde(default)]
    pub inputs: Vec<usize>,
}

/// Validates the subsystem list and builds the interconnection.
pub fn build_interconnection(n: usize, subsystems: Vec<SubsystemSpec>) -> Result<InterconnectionSpec> {
    if n == 0 {
        return Err(Error::NotAPartition("empty state".into()));
    }
    let mut owner = vec![None; n];
    for (i, s) in subsystems.iter().enumerate() {
        if s.state_coords.is_empty() {
            return Err(Error::NotAPartition(format!("subsystem {} has no states", i + 1)));
        }
        for &c in s.state_coords.iter().chain(&s.input_coords) {
            if c >= n {
                return Err(Error::IndexOutOfRange { index: c + 1, n });
            }
        }
        for &c in &s.state_coords {
            if let Some(prev) = owner[c] {
                return Err(Error::NotAPartition(format!(
                    "coordinate {} claimed by subsystems {} and {}",
                    c + 1,
                    prev + 1,
                    i + 1
                )));
            }
            owner[c] = Some(i);
        }
        let mut seen = s.input_coords.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::NotAPartition(format!(
                "subsystem {} lists an input twice",
                i + 1
            )));
        }
        if let Some(c) = s.input_coords.iter().find(|c| s.state_coords.contains(c)) {
            return Err(Error::NotAPartition(format!(
                "subsystem {} uses its own state {} as input",
                i + 1,
                c + 1
            )));
        }
    }
    if let Some(c) = owner.iter().position(Option::is_none) {
        return Err(Error::NotAPartition(format!("coordinate {} is not covered", c + 1)));
    }
    let mut subsystems = subsystems;
    subsystems.sort_by_key(|s| *s.state_coords.iter().min().expect("nonempty"));
    for (i, s) in subsystems.iter_mut().enumerate() {
        s.index = i;
    }
    Ok(InterconnectionSpec { n, subsystems })
}

/// One scalar subsystem per coordinate; each reads every other coordinate.
pub fn fully_connected_scalar(n: usize) -> Result<InterconnectionSpec> {
    if n < 2 {
        return Err(Error::InvalidConfig(
            "fully connected topology needs n >= 2".into(),
        ));
    }
    let subs = (0..n)
        .map(|i| SubsystemSpec::new(vec![i], (0..n).filter(|&j| j != i).collect()))
        .collect();
    build_interconnection(n, subs)
}

/// Builds a spec from the JSON topology structure (1-based coordinates).
pub fn from_config(cfg: &TopologyConfig) -> Result<InterconnectionSpec> {
    let to_zero = |v: &[usize]| -> Result<Vec<usize>> {
        v.iter()
            .map(|&c| {
                if c == 0 || c > cfg.n {
                    Err(Error::IndexOutOfRange { index: c, n: cfg.n })
                } else {
                    Ok(c - 1)
                }
            })
            .collect()
    };
    let mut subs = Vec::with_capacity(cfg.subsystems.len());
    for s in &cfg.subsystems {
        subs.push(SubsystemSpec::new(to_zero(&s.states)?, to_zero(&s.inputs)?));
    }
    build_interconnection(cfg.n, subs)
}

/// Parses a JSON topology document.
pub fn from_json(text: &str) -> Result<InterconnectionSpec> {
    let cfg: TopologyConfig = serde_json::from_str(text)?;
    from_config(&cfg)
}

impl InterconnectionSpec {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn subsystems(&self) -> &[SubsystemSpec] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    /// Total internal-input dimension `Σ pᵢ` (rows of `M`).
    pub fn input_total(&self) -> usize {
        self.subsystems.iter().map(SubsystemSpec::input_dim).sum()
    }

    /// First row of `M` belonging to each subsystem.
    pub fn input_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subsystems
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.input_dim();
                o
            })
            .collect()
    }

    /// Position of each subsystem's first state in the stacked vector `[x₁; …; x_N]`.
    pub fn state_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subsystems
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.state_dim();
                o
            })
            .collect()
    }

    /// The 0/1 matrix `M` of shape `(Σpᵢ) × n`.
    pub fn matrix<T: Real>(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.input_total(), self.n);
        let mut row = 0;
        for s in &self.subsystems {
            for &c in &s.input_coords {
                m[(row, c)] = T::one();
                row += 1;
            }
        }
        m
    }

    /// Permutation `Π` (n×n) with `Π·x = [x₁; …; x_N]`.
    pub fn stacking_matrix<T: Real>(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.n, self.n);
        let mut row = 0;
        for s in &self.subsystems {
            for &c in &s.state_coords {
                m[(row, c)] = T::one();
                row += 1;
            }
        }
        m
    }

    /// How many subsystems read each global coordinate as an input.
    pub fn fan_out(&self) -> Vec<usize> {
        let mut f = vec![0; self.n];
        for s in &self.subsystems {
            for &c in &s.input_coords {
                f[c] += 1;
            }
        }
        f
    }

    pub fn select_states<T: Real>(&self, i: usize, x: &[T]) -> Vec<T> {
        self.subsystems[i].state_coords.iter().map(|&c| x[c]).collect()
    }

    pub fn select_inputs<T: Real>(&self, i: usize, x: &[T]) -> Vec<T> {
        self.subsystems[i].input_coords.iter().map(|&c| x[c]).collect()
    }

    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            n: self.n,
            subsystems: self
                .subsystems
                .iter()
                .map(|s| SubsystemConfig {
                    states: s.state_coords.iter().map(|c| c + 1).collect(),
                    inputs: s.input_coords.iter().map(|c| c + 1).collect(),
                })
                .collect(),
        }
    }
}

impl From<InterconnectionSpec> for TopologyConfig {
    fn from(s: InterconnectionSpec) -> Self {
        s.to_config()
    }
}

impl TryFrom<TopologyConfig> for InterconnectionSpec {
    type Error = Error;
    fn try_from(c: TopologyConfig) -> Result<Self> {
        from_config(&c)
    }
}
