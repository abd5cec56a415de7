//! Exact policy evaluation on tabular games and the quantities of the
//! single-agent safety bound: surrogate improvement `L`, max conditional KL,
//! penalty coefficient `C`, and the penalized surrogate `F = L - C * KLmax`.
//!
//! All values come from one dense LU solve per policy; nothing is sampled.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::policy::{kl_divergence, JointPolicy, TabularPolicy};

/// Everything the bound needs about one joint policy.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    pub v: Vec<f64>,
    /// `q[s][ja]`
    pub q: Vec<Vec<f64>>,
    /// `a_joint[s][ja] = q[s][ja] - v[s]`
    pub a_joint: Vec<Vec<f64>>,
    /// `a_agent[i][s][a_i]`
    pub a_agent: Vec<Vec<Vec<f64>>>,
    pub j: f64,
    /// Discounted state visitation, normalized by `(1 - gamma)`.
    pub rho: Vec<f64>,
    /// `joint_probs[s][ja]`
    pub joint_probs: Vec<Vec<f64>>,
}

struct Induced {
    joint_probs: Vec<Vec<f64>>,
    r_pi: Vec<f64>,
    p_pi: DMatrix<f64>,
}

fn induced(game: &MarkovGame, policy: &JointPolicy) -> Result<Induced> {
    game.check_policy(policy)?;
    let n = game.n_states();
    let nj = game.n_joint_actions();
    let mut joint_probs = vec![vec![0.0; nj]; n];
    let mut r_pi = vec![0.0; n];
    let mut p_pi = DMatrix::zeros(n, n);
    for s in 0..n {
        let rows: Vec<Vec<f64>> = policy.per_agent.iter().map(|p| p.probs(s)).collect();
        for ja in 0..nj {
            let comps = game.joint_components(ja);
            let pr: f64 = comps.iter().zip(&rows).map(|(&a, row)| row[a]).product();
            joint_probs[s][ja] = pr;
            r_pi[s] += pr * game.reward(s, ja);
            for &(t, pt) in game.successors(s, ja) {
                p_pi[(s, t)] += pr * pt;
            }
        }
    }
    Ok(Induced {
        joint_probs,
        r_pi,
        p_pi,
    })
}

fn solve(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Vec<f64>> {
    let x = matrix
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular policy-evaluation system".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in policy evaluation".into()));
    }
    Ok(x.iter().copied().collect())
}

fn system(game: &MarkovGame, p_pi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = game.n_states();
    DMatrix::identity(n, n) - p_pi * game.discount()
}

/// State values `V = (I - gamma P_pi)^{-1} r_pi`.
pub fn state_values(game: &MarkovGame, policy: &JointPolicy) -> Result<Vec<f64>> {
    let ind = induced(game, policy)?;
    solve(system(game, &ind.p_pi), DVector::from_vec(ind.r_pi))
}

/// Expected discounted return from the initial distribution.
pub fn return_j(game: &MarkovGame, policy: &JointPolicy) -> Result<f64> {
    let v = state_values(game, policy)?;
    Ok(dot(game.initial_dist(), &v))
}

/// `rho = (1 - gamma) d (I - gamma P_pi)^{-1}`.
pub fn occupancy(game: &MarkovGame, policy: &JointPolicy) -> Result<Vec<f64>> {
    let ind = induced(game, policy)?;
    occupancy_from(game, &ind.p_pi)
}

fn occupancy_from(game: &MarkovGame, p_pi: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = system(game, p_pi).transpose();
    let d = DVector::from_column_slice(game.initial_dist());
    let x = solve(m, d)?;
    let scale = 1.0 - game.discount();
    Ok(x.into_iter().map(|v| (v * scale).max(0.0)).collect())
}

pub fn evaluate(game: &MarkovGame, policy: &JointPolicy) -> Result<ExactEvaluation> {
    let ind = induced(game, policy)?;
    let n = game.n_states();
    let nj = game.n_joint_actions();
    let gamma = game.discount();
    let v = solve(system(game, &ind.p_pi), DVector::from_vec(ind.r_pi.clone()))?;
    let rho = occupancy_from(game, &ind.p_pi)?;
    let mut q = vec![vec![0.0; nj]; n];
    let mut a_joint = vec![vec![0.0; nj]; n];
    for s in 0..n {
        for ja in 0..nj {
            let cont: f64 = game.successors(s, ja).iter().map(|&(t, p)| p * v[t]).sum();
            q[s][ja] = game.reward(s, ja) + gamma * cont;
            a_joint[s][ja] = q[s][ja] - v[s];
        }
    }
    let a_agent = (0..game.n_agents())
        .map(|i| marginal_advantage(game, policy, &ind.joint_probs, &q, &v, i))
        .collect();
    Ok(ExactEvaluation {
        j: dot(game.initial_dist(), &v),
        v,
        q,
        a_joint,
        a_agent,
        rho,
        joint_probs: ind.joint_probs,
    })
}

fn marginal_advantage(
    game: &MarkovGame,
    policy: &JointPolicy,
    joint_probs: &[Vec<f64>],
    q: &[Vec<f64>],
    v: &[f64],
    agent: usize,
) -> Vec<Vec<f64>> {
    let n_a = game.n_actions(agent);
    (0..game.n_states())
        .map(|s| {
            let own = policy.agent(agent).probs(s);
            let mut qi = vec![0.0; n_a];
            for (ja, &pj) in joint_probs[s].iter().enumerate() {
                let a = game.joint_components(ja)[agent];
                // pi^{-i}(a^{-i}|s) = pi(a|s) / pi^i(a^i|s); softmax rows are
                // strictly positive so the division is safe.
                qi[a] += pj / own[a] * q[s][ja];
            }
            qi.iter().map(|x| x - v[s]).collect()
        })
        .collect()
}

/// Single-agent advantage `A^i(s, a^i) = E_{a^{-i}}[Q(s, a)] - V(s)`.
pub fn agent_advantage(game: &MarkovGame, policy: &JointPolicy, agent: usize) -> Result<Vec<Vec<f64>>> {
    if agent >= game.n_agents() {
        return Err(Error::Domain(format!("agent {agent} out of range")));
    }
    Ok(evaluate(game, policy)?.a_agent.swap_remove(agent))
}

/// Max-norm Bellman residual `|V - r_pi - gamma P_pi V|`.
pub fn bellman_residual(game: &MarkovGame, policy: &JointPolicy, v: &[f64]) -> Result<f64> {
    let ind = induced(game, policy)?;
    let n = game.n_states();
    let mut worst: f64 = 0.0;
    for s in 0..n {
        let next: f64 = (0..n).map(|t| ind.p_pi[(s, t)] * v[t]).sum();
        worst = worst.max((v[s] - ind.r_pi[s] - game.discount() * next).abs());
    }
    Ok(worst)
}

/// `sup_s KL(old(.|s) || new(.|s))`, natural log.
pub fn max_kl(old: &TabularPolicy, new: &TabularPolicy) -> Result<f64> {
    if !old.same_shape(new) {
        return Err(Error::Domain(format!(
            "policy shapes differ: {}x{} vs {}x{}",
            old.n_states(),
            old.n_actions(),
            new.n_states(),
            new.n_actions()
        )));
    }
    Ok(max_kl_with_state(old, new).0)
}

fn max_kl_with_state(old: &TabularPolicy, new: &TabularPolicy) -> (f64, usize) {
    let mut best = (0.0, 0);
    for s in 0..old.n_states() {
        let kl = kl_divergence(&old.probs(s), &new.probs(s));
        if kl > best.0 {
            best = (kl, s);
        }
    }
    best
}

/// Largest absolute joint advantage under `eval`.
pub fn epsilon(eval: &ExactEvaluation) -> f64 {
    eval.a_joint
        .iter()
        .flatten()
        .fold(0.0, |m: f64, a| m.max(a.abs()))
}

pub fn penalty_from_epsilon(gamma: f64, epsilon: f64) -> f64 {
    4.0 * gamma * epsilon / ((1.0 - gamma) * (1.0 - gamma))
}

/// `C = 4 gamma eps / (1 - gamma)^2`, `eps = max_{s,a} |A(s,a)|`.
pub fn penalty_c(game: &MarkovGame, baseline: &JointPolicy) -> Result<f64> {
    let eval = evaluate(game, baseline)?;
    Ok(penalty_from_epsilon(game.discount(), epsilon(&eval)))
}

/// Precomputed surrogate for one micro-step: baseline evaluation plus the
/// slot being optimized. Cheap to evaluate repeatedly.
#[derive(Debug, Clone)]
pub struct SlotSurrogate {
    pub agent: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub advantage: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub c: f64,
    pub j: f64,
    incumbent: TabularPolicy,
}

impl SlotSurrogate {
    pub fn new(game: &MarkovGame, baseline: &JointPolicy, agent: usize) -> Result<Self> {
        if agent >= baseline.n_agents() {
            return Err(Error::Domain(format!("agent {agent} out of range")));
        }
        let eval = evaluate(game, baseline)?;
        let eps = epsilon(&eval);
        Ok(Self {
            agent,
            gamma: game.discount(),
            c: penalty_from_epsilon(game.discount(), eps),
            epsilon: eps,
            j: eval.j,
            rho: eval.rho,
            advantage: eval.a_agent[agent].clone(),
            incumbent: baseline.agent(agent).clone(),
        })
    }

    pub fn incumbent(&self) -> &TabularPolicy {
        &self.incumbent
    }

    fn check(&self, candidate: &TabularPolicy) -> Result<()> {
        if candidate.agent_id != self.agent || !candidate.same_shape(&self.incumbent) {
            return Err(Error::Precondition(format!(
                "candidate for agent {} does not fit slot {}",
                candidate.agent_id, self.agent
            )));
        }
        Ok(())
    }

    /// Surrogate improvement in return units:
    /// `L = 1/(1-gamma) * E_{s~rho, a~candidate}[A^i(s, a)]`.
    pub fn l(&self, candidate: &TabularPolicy) -> Result<f64> {
        self.check(candidate)?;
        let mut total = 0.0;
        for (s, &w) in self.rho.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            total += w * dot(&candidate.probs(s), &self.advantage[s]);
        }
        Ok(total / (1.0 - self.gamma))
    }

    pub fn max_kl(&self, candidate: &TabularPolicy) -> Result<f64> {
        self.check(candidate)?;
        Ok(max_kl_with_state(&self.incumbent, candidate).0)
    }

    pub fn f(&self, candidate: &TabularPolicy) -> Result<f64> {
        Ok(self.l(candidate)? - self.c * self.max_kl(candidate)?)
    }

    /// Gradient of `F` with respect to the candidate's logits. The max-KL
    /// term contributes a subgradient through its maximizing state.
    pub fn f_gradient(&self, candidate: &TabularPolicy) -> Result<Vec<f64>> {
        self.check(candidate)?;
        let n_a = candidate.n_actions();
        let mut grad = vec![0.0; candidate.logits().len()];
        let scale = 1.0 / (1.0 - self.gamma);
        for (s, &w) in self.rho.iter().enumerate() {
            let p = candidate.probs(s);
            let mean = dot(&p, &self.advantage[s]);
            for a in 0..n_a {
                grad[s * n_a + a] += scale * w * p[a] * (self.advantage[s][a] - mean);
            }
        }
        let (kl, s_star) = max_kl_with_state(&self.incumbent, candidate);
        if kl > 0.0 {
            let old = self.incumbent.probs(s_star);
            let new = candidate.probs(s_star);
            for a in 0..n_a {
                grad[s_star * n_a + a] -= self.c * (new[a] - old[a]);
            }
        }
        Ok(grad)
    }
}

/// `L` for replacing slot `candidate.agent_id` of `baseline` by `candidate`.
pub fn surrogate_l(game: &MarkovGame, baseline: &JointPolicy, candidate: &TabularPolicy) -> Result<f64> {
    SlotSurrogate::new(game, baseline, candidate.agent_id)?.l(candidate)
}

/// `F = L - C * KLmax(baseline slot, candidate)`.
pub fn surrogate_f(game: &MarkovGame, baseline: &JointPolicy, candidate: &TabularPolicy) -> Result<f64> {
    SlotSurrogate::new(game, baseline, candidate.agent_id)?.f(candidate)
}

/// Exact quantities of the single-agent safety bound at one micro-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroStepReport {
    pub j_old: f64,
    pub j_new: f64,
    pub l: f64,
    pub max_kl: f64,
    pub epsilon: f64,
    pub c: f64,
    /// `J_new - J_old - L + C * KLmax`; nonnegative up to round-off.
    pub slack: f64,
}

impl MicroStepReport {
    /// Column names, in order, of the CSV form including the locating keys.
    pub const CSV_HEADER: [&'static str; 10] = [
        "round", "agent", "microstep", "J_old", "J_new", "L", "max_kl", "epsilon", "C", "slack",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.j_old,
            self.j_new,
            self.l,
            self.max_kl,
            self.epsilon,
            self.c,
            self.slack,
        ]
    }
}

/// Certifies the bound for a change of exactly one slot.
pub fn microstep_bound(
    game: &MarkovGame,
    old: &JointPolicy,
    new: &JointPolicy,
    changed_agent: usize,
) -> Result<MicroStepReport> {
    if old.n_agents() != new.n_agents() {
        return Err(Error::Precondition("joint policies have different agent counts".into()));
    }
    let differing = old.differing_slots(new);
    if differing.iter().any(|&i| i != changed_agent) {
        return Err(Error::Precondition(format!(
            "slots {differing:?} differ, only {changed_agent} may change"
        )));
    }
    let surrogate = SlotSurrogate::new(game, old, changed_agent)?;
    let candidate = new.agent(changed_agent);
    let l = surrogate.l(candidate)?;
    let kl = surrogate.max_kl(candidate)?;
    let j_new = return_j(game, new)?;
    Ok(report_from(&surrogate, j_new, l, kl))
}

pub(crate) fn report_from(surrogate: &SlotSurrogate, j_new: f64, l: f64, kl: f64) -> MicroStepReport {
    MicroStepReport {
        j_old: surrogate.j,
        j_new,
        l,
        max_kl: kl,
        epsilon: surrogate.epsilon,
        c: surrogate.c,
        slack: j_new - surrogate.j - l + surrogate.c * kl,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn uniform(game: &MarkovGame) -> JointPolicy {
        JointPolicy::new(
            (0..game.n_agents())
                .map(|i| TabularPolicy::uniform(i, game.n_states(), game.n_actions(i)))
                .collect(),
        )
        .unwrap()
    }

    fn constant_reward_game(r: f64, gamma: f64) -> MarkovGame {
        let mut rng = rng::rng_from_seed(1);
        let g = MarkovGame::random(&mut rng, 3, vec![2, 2], gamma);
        let mut file = g.to_file();
        for row in &mut file.reward {
            row.iter_mut().for_each(|x| *x = r);
        }
        MarkovGame::from_file(file).unwrap()
    }

    #[test]
    fn zero_reward_zero_return() {
        let g = constant_reward_game(0.0, 0.9);
        assert_eq!(return_j(&g, &uniform(&g)).unwrap(), 0.0);
        assert_eq!(penalty_c(&g, &uniform(&g)).unwrap(), 0.0);
    }

    #[test]
    fn unit_reward_geometric_series() {
        let g = constant_reward_game(1.0, 0.9);
        assert!((return_j(&g, &uniform(&g)).unwrap() - 10.0).abs() < 1e-10);
    }

    #[test]
    fn single_absorbing_state_occupancy() {
        let g = MarkovGame::new(1, vec![2], vec![1.0, 1.0], vec![0.3, 0.1], vec![1.0], 0.9).unwrap();
        let rho = occupancy(&g, &uniform(&g)).unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_discount_occupancy_is_initial() {
        let mut rng = rng::rng_from_seed(2);
        let g = MarkovGame::random(&mut rng, 5, vec![2, 2], 1e-9);
        let rho = occupancy(&g, &uniform(&g)).unwrap();
        for (r, d) in rho.iter().zip(g.initial_dist()) {
            assert!((r - d).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_discount_penalty() {
        let mut rng = rng::rng_from_seed(4);
        let g = MarkovGame::random(&mut rng, 3, vec![2, 2], 0.0);
        assert_eq!(penalty_c(&g, &uniform(&g)).unwrap(), 0.0);
    }

    #[test]
    fn penalty_formula() {
        assert!((penalty_from_epsilon(0.9, 1.0) - 360.0).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let old = TabularPolicy::from_logits(0, 1, 2, vec![0.0, 0.0]).unwrap();
        let new = TabularPolicy::from_logits(0, 1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((max_kl(&old, &new).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.510_825_6).abs() < 1e-6);
        assert_eq!(max_kl(&old, &old).unwrap(), 0.0);

        // second state with a smaller divergence
        let old2 = TabularPolicy::uniform(0, 2, 2);
        let new2 = TabularPolicy::from_logits(
            0,
            2,
            2,
            vec![0.6f64.ln(), 0.4f64.ln(), 0.9f64.ln(), 0.1f64.ln()],
        )
        .unwrap();
        let small = 0.5 * (0.5f64 / 0.6).ln() + 0.5 * (0.5f64 / 0.4).ln();
        assert!(small < expected);
        assert!((max_kl(&old2, &new2).unwrap() - expected).abs() < 1e-12);

        let bad = TabularPolicy::uniform(0, 3, 2);
        assert!(matches!(max_kl(&old2, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_game_has_zero_agent_advantage() {
        let g = constant_reward_game(1.0, 0.8);
        for i in 0..2 {
            let adv = agent_advantage(&g, &uniform(&g), i).unwrap();
            assert!(adv.iter().flatten().all(|a| a.abs() < 1e-10));
        }
    }

    #[test]
    fn surrogate_zero_at_incumbent() {
        let g = MarkovGame::chain2();
        let mut rng = rng::rng_from_seed(9);
        let base = crate::policy::JointPolicy::new(vec![
            random_policy(&mut rng, 0, 2, 2),
            random_policy(&mut rng, 1, 2, 2),
        ])
        .unwrap();
        for i in 0..2 {
            assert!(surrogate_l(&g, &base, base.agent(i)).unwrap().abs() < 1e-10);
            assert!(surrogate_f(&g, &base, base.agent(i)).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn noop_microstep() {
        let g = MarkovGame::chain2();
        let p = uniform(&g);
        let r = microstep_bound(&g, &p, &p, 0).unwrap();
        assert_eq!(r.max_kl, 0.0);
        assert!(r.l.abs() < 1e-12);
        assert!(r.slack.abs() < 1e-12);
    }

    #[test]
    fn two_slot_change_rejected() {
        let g = MarkovGame::chain2();
        let p = uniform(&g);
        let mut rng = rng::rng_from_seed(1);
        let q = JointPolicy::new(vec![random_policy(&mut rng, 0, 2, 2), random_policy(&mut rng, 1, 2, 2)]).unwrap();
        assert!(matches!(microstep_bound(&g, &p, &q, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn f_gradient_matches_finite_differences_away_from_kinks() {
        let g = MarkovGame::chain2();
        let mut rng = rng::rng_from_seed(21);
        let base = JointPolicy::new(vec![random_policy(&mut rng, 0, 2, 2), random_policy(&mut rng, 1, 2, 2)]).unwrap();
        let sur = SlotSurrogate::new(&g, &base, 1).unwrap();
        let mut cand = base.agent(1).clone();
        cand.logits_mut()[0] += 0.3;
        cand.logits_mut()[3] -= 0.1;
        let grad = sur.f_gradient(&cand).unwrap();
        let h = 1e-6;
        for k in 0..grad.len() {
            let mut plus = cand.clone();
            plus.logits_mut()[k] += h;
            let mut minus = cand.clone();
            minus.logits_mut()[k] -= h;
            let fd = (sur.f(&plus).unwrap() - sur.f(&minus).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", grad[k]);
        }
    }

    pub(crate) fn random_policy(rng: &mut rng::SeedRng, agent: usize, s: usize, a: usize) -> TabularPolicy {
        use rand::Rng;
        TabularPolicy::from_logits(agent, s, a, (0..s * a).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }
}
