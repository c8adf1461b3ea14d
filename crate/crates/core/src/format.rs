//! JSON file formats for MDPs and custom policy features.
//!
//! MDP file:
//!
//! ```json
//! {
//!   "n_states": 2,
//!   "n_actions": 1,
//!   "transitions": [{"s": 0, "a": 0, "s_next": 1, "p": 1.0},
//!                   {"s": 1, "a": 0, "s_next": 0, "p": 1.0}],
//!   "rewards": [{"s": 0, "a": 0, "r": 1.0}],
//!   "initial_dist": [1.0, 0.0]
//! }
//! ```
//!
//! Omitted `(s, a, s_next)` triples have probability 0 and omitted `(s, a)`
//! rewards are 0. Duplicate records and unknown keys are rejected.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::mdp::TabularMdp;
use crate::policy::PolicyFeatures;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransitionRecord {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub s: usize,
    pub a: usize,
    pub r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<TransitionRecord>,
    pub rewards: Vec<RewardRecord>,
    pub initial_dist: Vec<f64>,
}

impl MdpFile {
    pub fn from_mdp<T: Scalar>(mdp: &TabularMdp<T>) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                for s_next in 0..ns {
                    let p = mdp.p(s, a, s_next).as_f64();
                    if p > 0.0 {
                        transitions.push(TransitionRecord { s, a, s_next, p });
                    }
                }
                let r = mdp.reward(s, a).as_f64();
                if r != 0.0 {
                    rewards.push(RewardRecord { s, a, r });
                }
            }
        }
        Self {
            n_states: ns,
            n_actions: na,
            transitions,
            rewards,
            initial_dist: mdp.initial_dist().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn to_mdp<T: Scalar>(&self) -> Result<TabularMdp<T>> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut p = vec![T::zero(); ns * na * ns];
        let mut seen = vec![false; ns * na * ns];
        for t in &self.transitions {
            if t.s >= ns || t.a >= na || t.s_next >= ns {
                return Err(Error::Parse(format!("transition record ({},{},{}) out of range", t.s, t.a, t.s_next)));
            }
            let k = (t.s * na + t.a) * ns + t.s_next;
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Parse(format!("duplicate transition record ({},{},{})", t.s, t.a, t.s_next)));
            }
            p[k] = T::lit(t.p);
        }
        let mut r = vec![T::zero(); ns * na];
        let mut seen = vec![false; ns * na];
        for rec in &self.rewards {
            if rec.s >= ns || rec.a >= na {
                return Err(Error::Parse(format!("reward record ({},{}) out of range", rec.s, rec.a)));
            }
            let k = rec.s * na + rec.a;
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Parse(format!("duplicate reward record ({},{})", rec.s, rec.a)));
            }
            r[k] = T::lit(rec.r);
        }
        let rho = self.initial_dist.iter().map(|&x| T::lit(x)).collect();
        TabularMdp::new(ns, na, p, r, rho)
    }
}

pub fn parse_mdp<T: Scalar>(text: &str) -> Result<TabularMdp<T>> {
    let file: MdpFile = serde_json::from_str(text)?;
    file.to_mdp()
}

pub fn read_mdp<T: Scalar>(path: impl AsRef<Path>) -> Result<TabularMdp<T>> {
    parse_mdp(&std::fs::read_to_string(path)?)
}

pub fn mdp_to_json<T: Scalar>(mdp: &TabularMdp<T>) -> String {
    serde_json::to_string_pretty(&MdpFile::from_mdp(mdp)).expect("MDP file is always serializable")
}

/// Custom policy features: one vector `ψ(s, a)` per state-action pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeatureFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub features: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub s: usize,
    pub a: usize,
    pub psi: Vec<f64>,
}

impl FeatureFile {
    pub fn to_features<T: Scalar>(&self) -> Result<PolicyFeatures<T>> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut table: Vec<Option<DVector<T>>> = vec![None; ns * na];
        for rec in &self.features {
            if rec.s >= ns || rec.a >= na {
                return Err(Error::Parse(format!("feature record ({},{}) out of range", rec.s, rec.a)));
            }
            if rec.psi.len() != self.dim {
                return Err(Error::Parse(format!("feature ({},{}) has length {}, expected {}", rec.s, rec.a, rec.psi.len(), self.dim)));
            }
            let slot = &mut table[rec.s * na + rec.a];
            if slot.is_some() {
                return Err(Error::Parse(format!("duplicate feature record ({},{})", rec.s, rec.a)));
            }
            *slot = Some(DVector::from_iterator(self.dim, rec.psi.iter().map(|&x| T::lit(x))));
        }
        let table = table
            .into_iter()
            .enumerate()
            .map(|(k, v)| v.ok_or_else(|| Error::Parse(format!("missing feature for ({},{})", k / na, k % na))))
            .collect::<Result<Vec<_>>>()?;
        PolicyFeatures::custom(ns, na, table)
    }
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<PolicyFeatures<T>> {
    let file: FeatureFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    file.to_features()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{self, EnvSpec};
    use proptest::prelude::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"{
            "n_states": 2, "n_actions": 1,
            "transitions": [{"s": 0, "a": 0, "s_next": 1, "p": 1.0},
                            {"s": 1, "a": 0, "s_next": 0, "p": 1.0}],
            "rewards": [{"s": 0, "a": 0, "r": 1.0}],
            "initial_dist": [1.0, 0.0]
        }"#;
        let mdp: TabularMdp<f64> = parse_mdp(text).unwrap();
        assert_eq!(mdp, envs::build(&EnvSpec::Cycle2).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"n_states": 1, "n_actions": 1, "transitions": [{"s":0,"a":0,"s_next":0,"p":1.0}],
                       "rewards": [], "initial_dist": [1.0], "gamma": 0.9}"#;
        assert!(matches!(parse_mdp::<f64>(text), Err(Error::Json(_))));
        let text = r#"{"n_states": 1, "n_actions": 1, "transitions": [{"s":0,"a":0,"s_next":0,"p":1.0,"w":1}],
                       "rewards": [], "initial_dist": [1.0]}"#;
        assert!(parse_mdp::<f64>(text).is_err());
    }

    #[test]
    fn duplicates_and_bad_mass_are_rejected() {
        let dup = r#"{"n_states": 1, "n_actions": 1,
            "transitions": [{"s":0,"a":0,"s_next":0,"p":0.5},{"s":0,"a":0,"s_next":0,"p":0.5}],
            "rewards": [], "initial_dist": [1.0]}"#;
        assert!(matches!(parse_mdp::<f64>(dup), Err(Error::Parse(_))));
        let short = r#"{"n_states": 1, "n_actions": 1,
            "transitions": [{"s":0,"a":0,"s_next":0,"p":0.9}],
            "rewards": [], "initial_dist": [1.0]}"#;
        assert!(matches!(parse_mdp::<f64>(short), Err(Error::InvalidMdp(_))));
    }

    proptest! {
        #[test]
        fn random_envs_round_trip(n in 2usize..7, m in 1usize..4, t in 0usize..2, seed in 0u64..1000) {
            let mdp: TabularMdp<f64> = envs::build(&EnvSpec::random(n + t, m, t, seed)).unwrap();
            let back: TabularMdp<f64> = parse_mdp(&mdp_to_json(&mdp)).unwrap();
            prop_assert_eq!(back, mdp);
        }
    }
}
