//! Monte Carlo tree search over grade histories, plus tabular Q-planning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Grade, N_GRADES};
use crate::error::{Error, Result};
use crate::planner::table::{row_of, Slab};
use crate::rng::SimRng;

/// Constants shared by every tree search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub gamma: f64,
    pub c_uct: f64,
    /// Reward range `(a, b)` entering the exploration magnitude.
    pub reward_bounds: [f64; 2],
    pub rewards: [f64; N_GRADES],
    pub cycles: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            c_uct: 3.0,
            reward_bounds: [-2.0, 1.0],
            rewards: [-1.0, 1.0, 1.0, 1.0, -2.0],
            cycles: crate::cohort::MAX_CYCLES,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(self.c_uct >= 0.0) {
            return Err(Error::InvalidInput("need γ ∈ [0, 1] and c_UCT ≥ 0".into()));
        }
        if !(self.reward_bounds[1] >= self.reward_bounds[0]) || self.cycles > crate::cohort::MAX_CYCLES {
            return Err(Error::InvalidInput("invalid reward bounds or cycle count".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, c: usize) -> f64 {
        epsilon(c, self.cycles, self.gamma, self.c_uct, self.reward_bounds)
    }

    pub fn reward(&self, g: Grade) -> f64 {
        self.rewards[g as usize]
    }

    /// Range of discounted returns over `remaining` cycles.
    pub fn return_bounds(&self, remaining: usize) -> (f64, f64) {
        let s: f64 = (0..remaining).map(|k| self.gamma.powi(k as i32)).sum();
        let lo = self.rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo * s, hi * s)
    }
}

/// ε_c = c_UCT · sqrt(Σ_{k=1}^{C−c} γ^{k−1} (b − a)²).
pub fn epsilon(c: usize, cycles: usize, gamma: f64, c_uct: f64, bounds: [f64; 2]) -> f64 {
    let range2 = (bounds[1] - bounds[0]).powi(2);
    let s: f64 = (1..=cycles.saturating_sub(c)).map(|k| gamma.powi(k as i32 - 1) * range2).sum();
    c_uct * s.sqrt()
}

/// G = Σ_k γ^k r_k.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// argmax_d q(s,d) + ε·sqrt(N(s))/(n(s,d)+1); ties go to the lowest dose.
pub fn uct_select(q: &[f64], n: &[u32], visits: u64, eps: f64) -> usize {
    let root = (visits as f64).sqrt();
    argmax_lowest(q.iter().zip(n).map(|(q, &n)| q + eps * root / (n as f64 + 1.0)))
}

/// As [`uct_select`] with the exploration term weighted by `prior`.
pub fn puct_select(q: &[f64], n: &[u32], visits: u64, prior: &[f64], eps: f64) -> usize {
    let root = (visits as f64).sqrt();
    argmax_lowest(
        q.iter()
            .zip(n)
            .zip(prior)
            .map(|((q, &n), p)| q + eps * p * root / (n as f64 + 1.0)),
    )
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Draws from `candidates` with probability proportional to `weights`.
fn pick_weighted(candidates: &[usize], weights: &[f64], rng: &mut SimRng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (&c, &w) in candidates.iter().zip(weights) {
        acc += w;
        if u < acc {
            return c;
        }
    }
    candidates[candidates.len() - 1]
}

/// A generative model of one patient (or toy) over successive cycles.
pub trait Environment: Sync {
    type Episode;

    fn n_actions(&self) -> usize;

    /// Starts a new episode at the tree root.
    fn begin(&self, rng: &mut SimRng) -> Result<Self::Episode>;

    /// Applies dose index `action` for one cycle and returns the grade.
    fn step(&self, episode: &mut Self::Episode, action: usize, rng: &mut SimRng) -> Result<Grade>;
}

/// Prior probabilities for the rows of a tree, looked up lazily.
pub trait Priors {
    fn row(&mut self, row: usize, suffix: &[Grade]) -> Result<&[f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub grades: Vec<Grade>,
    pub rewards: Vec<f64>,
    /// Discounted return from the tree root.
    pub ret: f64,
}

/// One MCTS episode on `slab`, whose root sits at cycle `start_depth`:
/// selection down fully expanded nodes, expansion of one untried dose,
/// a uniformly random rollout and an incremental-mean backup along the path.
/// With `priors` the selection is PUCT and expansion draws untried doses in
/// proportion to their prior.
pub fn run_episode<E: Environment>(
    slab: &mut Slab,
    env: &E,
    start_depth: usize,
    params: &SearchParams,
    mut priors: Option<&mut dyn Priors>,
    rng: &mut SimRng,
    on_backup: &mut dyn FnMut(usize, usize, f64),
) -> Result<EpisodeOutcome> {
    let n_actions = env.n_actions();
    if slab.n_actions != n_actions {
        return Err(Error::Dimension { what: "actions", expected: slab.n_actions, got: n_actions });
    }
    if start_depth >= params.cycles {
        return Err(Error::LeafState);
    }
    let mut ep = env.begin(rng)?;
    let horizon = params.cycles - start_depth;
    let mut suffix: Vec<Grade> = Vec::with_capacity(horizon);
    let mut path: Vec<(usize, usize)> = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut in_tree = true;
    for k in 0..horizon {
        let action = if in_tree {
            let row = row_of(&suffix)?;
            let n = slab.n_row(row);
            let untried: Vec<usize> = (0..n_actions).filter(|&a| n[a] == 0).collect();
            let prior = match priors.as_deref_mut() {
                Some(p) => Some(p.row(row, &suffix)?),
                None => None,
            };
            let a = if !untried.is_empty() {
                in_tree = false;
                let w: Vec<f64> = match prior {
                    Some(p) => untried.iter().map(|&a| p[a]).collect(),
                    None => vec![1.0; untried.len()],
                };
                pick_weighted(&untried, &w, rng)
            } else {
                let eps = params.epsilon(start_depth + k);
                match prior {
                    Some(p) => puct_select(slab.q_row(row), n, slab.visits[row], p, eps),
                    None => uct_select(slab.q_row(row), n, slab.visits[row], eps),
                }
            };
            path.push((row, a));
            a
        } else {
            rng.random_range(0..n_actions)
        };
        let g = env.step(&mut ep, action, rng)?;
        rewards.push(params.reward(g));
        suffix.push(g);
    }
    let (lo, hi) = params.return_bounds(horizon);
    let ret = discounted_return(&rewards, params.gamma);
    assert!(ret >= lo - 1e-12 && ret <= hi + 1e-12, "return {ret} outside [{lo}, {hi}]");
    for (i, &(row, a)) in path.iter().enumerate() {
        let g = discounted_return(&rewards[i..], params.gamma);
        slab.backup(row, a, g);
        on_backup(row, a, g);
    }
    Ok(EpisodeOutcome { grades: suffix, rewards, ret })
}

/// Runs `episodes` UCT episodes from the population root. Failed episodes
/// are logged and skipped; the number of completed episodes is returned.
pub fn mcts_train<E: Environment>(
    slab: &mut Slab,
    env: &E,
    params: &SearchParams,
    episodes: u64,
    rng: &mut SimRng,
    on_backup: &mut dyn FnMut(usize, usize, f64),
) -> u64 {
    let mut done = 0;
    for k in 0..episodes {
        match run_episode(slab, env, 0, params, None, rng, on_backup) {
            Ok(_) => done += 1,
            Err(e) => log::warn!("episode {k} aborted: {e}"),
        }
    }
    done
}

/// q ← q + α(R + γ·max q(s′,·) − q); without a successor the max term is dropped.
pub fn q_learning_update(q: f64, alpha: f64, reward: f64, gamma: f64, max_next: Option<f64>) -> f64 {
    q + alpha * (reward + gamma * max_next.unwrap_or(0.0) - q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QPlanningConfig {
    pub alpha: f64,
    /// Exploration probability, decayed linearly from start to end.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

impl Default for QPlanningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
        }
    }
}

/// ε-greedy Q-planning over `episodes` simulated patients.
pub fn q_planning<E: Environment>(
    slab: &mut Slab,
    env: &E,
    params: &SearchParams,
    config: &QPlanningConfig,
    episodes: u64,
    rng: &mut SimRng,
) -> Result<u64> {
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(Error::InvalidInput("learning rate must lie in (0, 1]".into()));
    }
    let n_actions = env.n_actions();
    let mut done = 0;
    for k in 0..episodes {
        let frac = if episodes > 1 { k as f64 / (episodes - 1) as f64 } else { 1.0 };
        let explore = config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;
        let mut ep = match env.begin(rng) {
            Ok(ep) => ep,
            Err(e) => {
                log::warn!("episode {k} aborted: {e}");
                continue;
            }
        };
        let mut history: Vec<Grade> = Vec::new();
        let mut ok = true;
        for c in 0..params.cycles {
            let row = row_of(&history)?;
            let a = if rng.random::<f64>() < explore {
                rng.random_range(0..n_actions)
            } else {
                argmax_lowest(slab.q_row(row).iter().copied())
            };
            let g = match env.step(&mut ep, a, rng) {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("episode {k} aborted: {e}");
                    ok = false;
                    break;
                }
            };
            history.push(g);
            let max_next = if c + 1 < params.cycles {
                let next = row_of(&history)?;
                Some(slab.q_row(next).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            } else {
                None
            };
            let i = row * n_actions + a;
            slab.q[i] = q_learning_update(slab.q[i], config.alpha, params.reward(g), params.gamma, max_next);
            slab.n[i] += 1;
            slab.visits[row] += 1;
        }
        if ok {
            done += 1;
        }
    }
    Ok(done)
}
