//! Finite MDPs with exact policy evaluation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const MAX_STATES: usize = 64;
pub const MAX_ACTIONS: usize = 8;

/// A finite discounted MDP. `transitions[(s * A + a) * S + s2] = P(s2 | s, a)`,
/// `rewards[s * A + a] = r*(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub transitions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        check_bounds(num_states, num_actions, gamma)?;
        check_len(
            "transition tensor",
            num_states * num_actions * num_states,
            transitions.len(),
        )?;
        check_len("reward table", num_states * num_actions, rewards.len())?;
        for (row, p) in transitions.chunks_exact(num_states).enumerate() {
            let total: f64 = p.iter().sum();
            if p.iter().any(|v| *v < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "transition row {row} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            rewards,
            gamma,
        })
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.num_actions + a) * self.num_states + next]
    }

    /// Uniformly random stochastic policy drawn with `rng`.
    pub fn random_policy<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut pi = Vec::with_capacity(self.num_states * self.num_actions);
        for _ in 0..self.num_states {
            pi.extend(normalized_draw(rng, self.num_actions));
        }
        pi
    }
}

fn check_bounds(num_states: usize, num_actions: usize, gamma: f64) -> Result<()> {
    if num_states == 0 || num_states > MAX_STATES {
        return Err(Error::InvalidConfig(format!(
            "num_states must be in 1..={MAX_STATES}, got {num_states}"
        )));
    }
    if num_actions == 0 || num_actions > MAX_ACTIONS {
        return Err(Error::InvalidConfig(format!(
            "num_actions must be in 1..={MAX_ACTIONS}, got {num_actions}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma must be in (0, 1), got {gamma}")));
    }
    Ok(())
}

// Normalized exponential draws, i.e. a flat Dirichlet sample.
fn normalized_draw<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // Push the rounding residue into the largest entry so the row sums to 1.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).expect("n >= 1");
    p[imax] += residue;
    p
}

/// Random MDP: transition rows from a flat Dirichlet, rewards uniform in `[0, 1]`.
pub fn random_mdp(seed: u64, num_states: usize, num_actions: usize, gamma: f64) -> Result<TabularMdp> {
    check_bounds(num_states, num_actions, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        transitions.extend(normalized_draw(&mut rng, num_states));
    }
    let rewards = (0..num_states * num_actions)
        .map(|_| rng.random_range(0.0..=1.0))
        .collect();
    TabularMdp::new(num_states, num_actions, transitions, rewards, gamma)
}

/// Exact Q-function of `policy` (row-stochastic `S x A`) under `reward`
/// (`S x A`), from the linear Bellman evaluation equations.
pub fn policy_eval(mdp: &TabularMdp, policy: &[f64], reward: &[f64]) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    check_len("policy", ns * na, policy.len())?;
    check_len("reward table", ns * na, reward.len())?;
    for (s, row) in policy.chunks_exact(na).enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "policy row {s} is not a distribution (sum {total})"
            )));
        }
    }
    let g = mdp.gamma;
    // (I - g P_pi) V = r_pi
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for act in 0..na {
            let w = policy[s * na + act];
            if w == 0.0 {
                continue;
            }
            b[s] += w * reward[s * na + act];
            for s2 in 0..ns {
                a[(s, s2)] -= g * w * mdp.prob(s, act, s2);
            }
        }
    }
    let v = a.lu().solve(&b).expect("I - gamma P_pi is non-singular for gamma < 1");
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for act in 0..na {
            let mut next = 0.0;
            for s2 in 0..ns {
                next += mdp.prob(s, act, s2) * v[s2];
            }
            q[s * na + act] = reward[s * na + act] + g * next;
        }
    }
    let residual = bellman_residual(mdp, policy, reward, &q);
    assert!(residual <= 1e-10, "policy evaluation residual {residual}");
    Ok(q)
}

/// Sup-norm of `Q - (r + gamma P pi Q)`.
pub fn bellman_residual(mdp: &TabularMdp, policy: &[f64], reward: &[f64], q: &[f64]) -> f64 {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let v: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| policy[s * na + a] * q[s * na + a]).sum())
        .collect();
    let mut worst: f64 = 0.0;
    for s in 0..ns {
        for act in 0..na {
            let next: f64 = (0..ns).map(|s2| mdp.prob(s, act, s2) * v[s2]).sum();
            let target = reward[s * na + act] + mdp.gamma * next;
            worst = worst.max((q[s * na + act] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value_iteration(mdp: &TabularMdp, policy: &[f64], reward: &[f64], iters: usize) -> Vec<f64> {
        let (ns, na) = (mdp.num_states, mdp.num_actions);
        let mut q = vec![0.0; ns * na];
        for _ in 0..iters {
            let v: Vec<f64> = (0..ns)
                .map(|s| (0..na).map(|a| policy[s * na + a] * q[s * na + a]).sum())
                .collect();
            let mut next_q = vec![0.0; ns * na];
            for s in 0..ns {
                for a in 0..na {
                    let ev: f64 = (0..ns).map(|s2| mdp.prob(s, a, s2) * v[s2]).sum();
                    next_q[s * na + a] = reward[s * na + a] + mdp.gamma * ev;
                }
            }
            q = next_q;
        }
        q
    }

    #[test]
    fn rows_are_distributions_and_seeded() {
        let m = random_mdp(3, 10, 4, 0.9).unwrap();
        for row in m.transitions.chunks_exact(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(m.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        assert_eq!(m, random_mdp(3, 10, 4, 0.9).unwrap());
        assert_ne!(m, random_mdp(4, 10, 4, 0.9).unwrap());
    }

    #[test]
    fn bounds_enforced() {
        assert!(random_mdp(0, 65, 2, 0.9).is_err());
        assert!(random_mdp(0, 4, 9, 0.9).is_err());
        assert!(random_mdp(0, 4, 2, 1.0).is_err());
    }

    #[test]
    fn zero_and_constant_rewards() {
        let m = random_mdp(1, 6, 3, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pi = m.random_policy(&mut rng);
        let q0 = policy_eval(&m, &pi, &[0.0; 18]).unwrap();
        assert!(q0.iter().all(|v| v.abs() < 1e-14));
        let qc = policy_eval(&m, &pi, &[2.0; 18]).unwrap();
        assert!(qc.iter().all(|v| (v - 2.0 / 0.2).abs() < 1e-10));
    }

    #[test]
    fn single_state_is_a_geometric_series() {
        let m = random_mdp(5, 1, 3, 0.95).unwrap();
        let pi = vec![0.2, 0.5, 0.3];
        let q = policy_eval(&m, &pi, &m.rewards).unwrap();
        let v: f64 = (0..3).map(|a| pi[a] * m.rewards[a]).sum::<f64>() / 0.05;
        for a in 0..3 {
            // Q(s,a) = r(s,a) + gamma V and V = r_pi / (1 - gamma).
            assert!((q[a] - (m.rewards[a] + 0.95 * v)).abs() < 1e-10);
        }
        // Under a deterministic policy the chosen action's Q is r / (1 - gamma).
        let q_det = policy_eval(&m, &[0.0, 1.0, 0.0], &m.rewards).unwrap();
        assert!((q_det[1] - m.rewards[1] / 0.05).abs() < 1e-10);
    }

    #[test]
    fn matches_iterative_oracle() {
        let m = random_mdp(11, 5, 3, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = m.random_policy(&mut rng);
        let exact = policy_eval(&m, &pi, &m.rewards).unwrap();
        let iterative = value_iteration(&m, &pi, &m.rewards, 10_000);
        for (a, b) in exact.iter().zip(&iterative) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_stochastic_policy_rejected() {
        let m = random_mdp(1, 2, 2, 0.5).unwrap();
        assert!(policy_eval(&m, &[0.5, 0.4, 1.0, 0.0], &m.rewards).is_err());
    }

    proptest::proptest! {
        #[test]
        fn reward_perturbation_bound(seed in 0u64..500, delta in 0.0f64..1.0, gamma in 0.05f64..0.99) {
            let m = random_mdp(seed, 7, 3, gamma).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let pi = m.random_policy(&mut rng);
            let r2: Vec<f64> = m.rewards.iter().map(|r| r + rng.random_range(-delta..=delta)).collect();
            let q1 = policy_eval(&m, &pi, &m.rewards).unwrap();
            let q2 = policy_eval(&m, &pi, &r2).unwrap();
            let gap = q1.iter().zip(&q2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            proptest::prop_assert!(gap <= delta / (1.0 - gamma) + 1e-8);
        }
    }
}
