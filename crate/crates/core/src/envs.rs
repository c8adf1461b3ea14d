//! Built-in MDPs: small fixtures with periodic and transient structure, and a
//! seeded generator of random unichain MDPs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::chain::analyze_chain;
use crate::mdp::TabularMdp;
use crate::policy::{PolicyTable, SoftmaxPolicy};
use crate::{Error, Result, Scalar};

/// Random policies each generated MDP is checked against (besides uniform).
pub const UNICHAIN_CHECK_POLICIES: usize = 20;
const GENERATION_ATTEMPTS: u64 = 32;
const EXTRA_EDGE_PROB: f64 = 0.3;

/// Names one built-in MDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvSpec {
    /// Two states alternating deterministically, one action, `r = [1, 0]`.
    Cycle2,
    /// `Cycle2` plus a transient state (index 0) leading into it.
    TCycle,
    /// One state, two actions, `r = [0, 1]`.
    Bandit,
    /// A `period`-state deterministic cycle; actions only choose the reward.
    PCycle { period: usize, n_actions: usize },
    /// Random strongly connected core plus a transient in-tree. Transient
    /// states come first. All actions of a state share one support, so the
    /// recurrent structure is the same under every softmax policy.
    Random { n_states: usize, n_actions: usize, n_transient: usize, seed: u64 },
}

impl EnvSpec {
    pub fn random(n_states: usize, n_actions: usize, n_transient: usize, seed: u64) -> Self {
        Self::Random { n_states, n_actions, n_transient, seed }
    }

    /// The fixtures with a fixed, hand-checkable structure.
    pub fn fixtures() -> Vec<EnvSpec> {
        vec![
            Self::Cycle2,
            Self::TCycle,
            Self::Bandit,
            Self::PCycle { period: 3, n_actions: 2 },
            Self::random(8, 3, 2, 7),
        ]
    }

    pub fn has_choice(&self) -> bool {
        match *self {
            Self::Cycle2 | Self::TCycle => false,
            Self::Bandit => true,
            Self::PCycle { n_actions, .. } | Self::Random { n_actions, .. } => n_actions > 1,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Self::Cycle2 => "2-state deterministic cycle, 1 action, r = [1, 0]".into(),
            Self::TCycle => "transient state 0 feeding the 2-cycle {1, 2}".into(),
            Self::Bandit => "1 state, 2 actions, r = [0, 1]".into(),
            Self::PCycle { period, n_actions } => {
                format!("{period}-state cycle, {n_actions} actions choosing the reward")
            }
            Self::Random { n_states, n_actions, n_transient, seed } => format!(
                "random unichain MDP: {n_states} states ({n_transient} transient), {n_actions} actions, seed {seed}"
            ),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Cycle2 => write!(f, "cycle2"),
            Self::TCycle => write!(f, "tcycle"),
            Self::Bandit => write!(f, "bandit"),
            Self::PCycle { period, n_actions } => write!(f, "pcycle:{period}:{n_actions}"),
            Self::Random { n_states, n_actions, n_transient, seed } => {
                write!(f, "rand:{n_states}:{n_actions}:{n_transient}:{seed}")
            }
        }
    }
}

impl FromStr for EnvSpec {
    type Err = Error;

    /// Parses `cycle2`, `tcycle`, `bandit`, `pcycle:P:M` and `rand:N:M:T:SEED`.
    fn from_str(text: &str) -> Result<Self> {
        let lower = text.trim().to_ascii_lowercase();
        let parts: Vec<&str> = lower.split(':').collect();
        let num = |i: usize| -> Result<u64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Parse(format!("'{text}': missing parameter {i}")))?
                .parse::<u64>()
                .map_err(|e| Error::Parse(format!("'{text}': {e}")))
        };
        let spec = match (parts[0], parts.len()) {
            ("cycle2", 1) => Self::Cycle2,
            ("tcycle", 1) => Self::TCycle,
            ("bandit", 1) => Self::Bandit,
            ("pcycle", 3) => Self::PCycle { period: num(1)? as usize, n_actions: num(2)? as usize },
            ("rand", 5) => Self::random(num(1)? as usize, num(2)? as usize, num(3)? as usize, num(4)?),
            _ => {
                return Err(Error::Parse(format!(
                    "unknown environment '{text}' (expected cycle2, tcycle, bandit, pcycle:P:M or rand:N:M:T:SEED)"
                )))
            }
        };
        Ok(spec)
    }
}

/// Builds the MDP named by `spec`.
pub fn build<T: Scalar>(spec: &EnvSpec) -> Result<TabularMdp<T>> {
    let parts = match *spec {
        EnvSpec::Cycle2 => Parts {
            ns: 2,
            na: 1,
            p: vec![0.0, 1.0, 1.0, 0.0],
            r: vec![1.0, 0.0],
            rho: vec![1.0, 0.0],
        },
        EnvSpec::TCycle => Parts {
            ns: 3,
            na: 1,
            p: vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            r: vec![0.0, 1.0, 0.0],
            rho: vec![1.0, 0.0, 0.0],
        },
        EnvSpec::Bandit => Parts { ns: 1, na: 2, p: vec![1.0, 1.0], r: vec![0.0, 1.0], rho: vec![1.0] },
        EnvSpec::PCycle { period, n_actions } => pcycle(period, n_actions)?,
        EnvSpec::Random { n_states, n_actions, n_transient, seed } => {
            return random_unichain(n_states, n_actions, n_transient, seed).map(|p| p.into_mdp())?;
        }
    };
    parts.into_mdp()
}

struct Parts {
    ns: usize,
    na: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    rho: Vec<f64>,
}

impl Parts {
    fn into_mdp<T: Scalar>(self) -> Result<TabularMdp<T>> {
        let conv = |v: Vec<f64>| v.into_iter().map(T::lit).collect();
        TabularMdp::new(self.ns, self.na, conv(self.p), conv(self.r), conv(self.rho))
    }
}

fn pcycle(period: usize, na: usize) -> Result<Parts> {
    if period == 0 || na == 0 {
        return Err(Error::Domain("pcycle needs a positive period and action count".into()));
    }
    let mut p = vec![0.0; period * na * period];
    let mut r = vec![0.0; period * na];
    for s in 0..period {
        for a in 0..na {
            p[(s * na + a) * period + (s + 1) % period] = 1.0;
            r[s * na + a] = if na == 1 {
                if s == 0 { 1.0 } else { 0.0 }
            } else {
                ((s + a) % na) as f64 / (na - 1) as f64
            };
        }
    }
    let mut rho = vec![0.0; period];
    rho[0] = 1.0;
    Ok(Parts { ns: period, na, p, r, rho })
}

fn random_unichain(ns: usize, na: usize, nt: usize, seed: u64) -> Result<Parts> {
    if ns == 0 || na == 0 || nt >= ns {
        return Err(Error::Domain(format!(
            "random MDP needs n_states > n_transient >= 0 and n_actions > 0 (got {ns}, {na}, {nt})"
        )));
    }
    let mut last = String::new();
    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let parts = random_parts(ns, na, nt, &mut rng);
        match check_unichain(&parts, &mut rng) {
            Ok(()) => return Ok(parts),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::GenerationFailed(format!(
        "no unichain MDP after {GENERATION_ATTEMPTS} attempts (last failure: {last})"
    )))
}

fn random_parts(ns: usize, na: usize, nt: usize, rng: &mut ChaCha8Rng) -> Parts {
    let nc = ns - nt;
    let mut support = vec![Vec::<usize>::new(); ns];

    // A random Hamiltonian cycle makes the core strongly connected.
    let mut order: Vec<usize> = (nt..ns).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for i in 0..nc {
        support[order[i]].push(order[(i + 1) % nc]);
    }
    for s in nt..ns {
        for s2 in nt..ns {
            if !support[s].contains(&s2) && rng.random::<f64>() < EXTRA_EDGE_PROB {
                support[s].push(s2);
            }
        }
    }
    // Transient state i points to a parent among the core and the transient
    // states with larger index, so every transient state drains into the core.
    for s in (0..nt).rev() {
        let parent = rng.random_range(s + 1..ns);
        support[s].push(parent);
        if rng.random::<f64>() < 0.5 {
            support[s].push(s);
        }
        let extra = rng.random_range(nt..ns);
        if !support[s].contains(&extra) {
            support[s].push(extra);
        }
    }

    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for s in 0..ns {
        let k = support[s].len() as f64;
        for a in 0..na {
            let w: Vec<f64> = support[s].iter().map(|_| Exp1.sample(rng)).collect();
            let total: f64 = w.iter().sum();
            let row = &mut p[(s * na + a) * ns..(s * na + a + 1) * ns];
            for (&s2, wi) in support[s].iter().zip(&w) {
                row[s2] = 0.9 * wi / total + 0.1 / k;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
            r[s * na + a] = rng.random::<f64>();
        }
    }
    let rho = vec![1.0 / ns as f64; ns];
    Parts { ns, na, p, r, rho }
}

fn check_unichain(parts: &Parts, rng: &mut ChaCha8Rng) -> Result<()> {
    let mdp: TabularMdp<f64> = TabularMdp::new(parts.ns, parts.na, parts.p.clone(), parts.r.clone(), parts.rho.clone())?;
    analyze_chain(&mdp.induced_kernel(&PolicyTable::uniform(parts.ns, parts.na))?)?;
    let base = SoftmaxPolicy::tabular(parts.ns, parts.na);
    for _ in 0..UNICHAIN_CHECK_POLICIES {
        let theta = DVector::from_fn(base.dim(), |_, _| { let x: f64 = StandardNormal.sample(rng); 2.0 * x });
        analyze_chain(&mdp.induced_kernel(&base.with_theta(theta)?.table())?)?;
    }
    Ok(())
}
