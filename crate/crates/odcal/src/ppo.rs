//! Proximal policy optimization over the dispatch environment.
//!
//! Rollouts are whole episodes; advantages come from generalized advantage
//! estimation with a zero bootstrap at the horizon. The update is the
//! clipped surrogate objective with a value-error term and an entropy bonus,
//! optimized by Adam on minibatches with a global gradient-norm clip. The
//! gradient of the full loss is assembled analytically from per-sample
//! logit/value seeds and the network backward pass.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::env::{episode_return, Env, EnvConfig, EnvError, GroundTruthTable, Trajectory};
use crate::neural::{
    adam_update, log_prob_and_entropy, sample_action, sigmoid, AdamConfig, AdamState, MlpParams,
    NeuralError,
};
use crate::rng::{subseed, substream};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub hidden_dim: usize,
    /// GAE smoothing factor.
    pub lambda: f64,
    /// Clip radius for the probability ratio.
    pub clip_eps: f64,
    /// Weight of the value-error term.
    pub c1: f64,
    /// Weight of the entropy bonus.
    pub c2: f64,
    /// Optimization passes over each update batch.
    pub epochs: u32,
    pub minibatch: usize,
    /// Episodes collected per update batch.
    pub episodes_per_update: u32,
    /// Total training episodes.
    pub budget_episodes: u32,
    pub grad_clip: f64,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            hidden_dim: 64,
            // Rewards arrive only at output-interval boundaries (every 60th
            // step), so credit must survive the full gap between them.
            // lambda = 1 keeps the Monte-Carlo tail alive across the interval;
            // shorter decays starve the early-interval actions of credit.
            lambda: 1.0,
            clip_eps: 0.2,
            c1: 0.5,
            // Small entropy bonus: with larger values the entropy gradient
            // balances the policy gradient while release probabilities are
            // still well above zero, flooring the achievable error.
            c2: 0.001,
            epochs: 10,
            minibatch: 360,
            episodes_per_update: 4,
            budget_episodes: 2000,
            grad_clip: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

/// Generalized advantage estimation. `values` carries one entry per step
/// plus the bootstrap value of the state after the last step (zero when the
/// episode terminates there). Returns (advantages, value targets).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(values.len(), rewards.len() + 1, "values must include the bootstrap");
    assert_eq!(dones.len(), rewards.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * mask - values[t];
        acc = delta + gamma * lambda * mask * acc;
        advantages[t] = acc;
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, targets)
}

/// The clipped surrogate objective for one sample:
/// `min(ratio * A, clamp(ratio, 1-eps, 1+eps) * A)`.
pub fn clip_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Flattened on-policy experience for one update batch.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub obs: Vec<Vec<f64>>,
    pub bits: Vec<Vec<bool>>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Shifts and scales advantages to zero mean and unit variance over the
    /// whole batch.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for a in &mut self.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Full minimized objective: -(policy - c1*value + c2*entropy).
    pub total: f64,
    /// Mean clipped surrogate (to maximize).
    pub policy: f64,
    /// Mean squared value error.
    pub value: f64,
    /// Mean policy entropy.
    pub entropy: f64,
    /// Largest |ratio - 1| seen in the minibatch.
    pub max_ratio_dev: f64,
}

/// Evaluates the PPO loss and its full parameter gradient over the selected
/// batch rows. Pure in `params`, which makes it directly checkable against
/// finite differences.
pub fn ppo_loss(
    params: &MlpParams,
    batch: &RolloutBatch,
    indices: &[usize],
    cfg: &PpoConfig,
) -> (LossTerms, Vec<f64>) {
    assert!(!indices.is_empty());
    let b = indices.len() as f64;
    let mut grad = vec![0.0; params.theta.len()];
    let mut policy_acc = 0.0;
    let mut value_acc = 0.0;
    let mut entropy_acc = 0.0;
    let mut max_ratio_dev = 0.0f64;

    for &i in indices {
        let obs = &batch.obs[i];
        let bits = &batch.bits[i];
        let adv = batch.advantages[i];
        let v_target = batch.value_targets[i];

        let (out, cache) = params.forward_cache(obs);
        let (logp, entropy) = log_prob_and_entropy(&out.logits, bits);
        let ratio = (logp - batch.old_logp[i]).exp();
        max_ratio_dev = max_ratio_dev.max((ratio - 1.0).abs());

        let s1 = ratio * adv;
        let s2 = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        policy_acc += s1.min(s2);
        let v_err = out.value - v_target;
        value_acc += v_err * v_err;
        entropy_acc += entropy;

        // Seeds of d(total)/d(logit_j) and d(total)/d(value).
        let unclipped = s1 <= s2;
        let mut dlogits = vec![0.0; out.logits.len()];
        for (j, d) in dlogits.iter_mut().enumerate() {
            let l = out.logits[j];
            let p = sigmoid(l);
            let policy_seed = if unclipped {
                let dlogp = f64::from(u8::from(bits[j])) - p;
                ratio * adv * dlogp
            } else {
                0.0
            };
            let dentropy = -l * p * (1.0 - p);
            *d = -(policy_seed + cfg.c2 * dentropy) / b;
        }
        let dvalue = 2.0 * cfg.c1 * v_err / b;
        params.backward(obs, &cache, &dlogits, dvalue, &mut grad);
    }

    let policy = policy_acc / b;
    let value = value_acc / b;
    let entropy = entropy_acc / b;
    let total = -(policy - cfg.c1 * value + cfg.c2 * entropy);
    (LossTerms { total, policy, value, entropy, max_ratio_dev }, grad)
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStat {
    pub episode: u32,
    /// Undiscounted calibration error, the sum over intervals of squared
    /// detector-count distances.
    pub error: f64,
    pub discounted_return: f64,
}

/// Outcome of one calibration run (any method): the best demand trajectory
/// found, its error and simulated table on the training seeds, and the
/// per-episode history.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub best_trajectory: Trajectory,
    pub best_error: f64,
    pub best_table: GroundTruthTable,
    pub episodes: Vec<EpisodeStat>,
    pub checkpoint: Option<PathBuf>,
}

struct EpisodeRollout {
    obs: Vec<Vec<f64>>,
    bits: Vec<Vec<bool>>,
    logp: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    table: Vec<Vec<u32>>,
    trajectory: Trajectory,
    error: f64,
}

fn collect_episode(
    env: &mut Env,
    params: &MlpParams,
    env_seed: u64,
    act_rng: &mut impl Rng,
) -> Result<EpisodeRollout, PpoError> {
    let t_steps = env.config().t_steps as usize;
    let n_od = env.config().n_od();
    let mut obs = Vec::with_capacity(t_steps);
    let mut bits = Vec::with_capacity(t_steps);
    let mut logp = Vec::with_capacity(t_steps);
    let mut values = Vec::with_capacity(t_steps + 1);
    let mut rewards = Vec::with_capacity(t_steps);
    let mut trajectory = Trajectory::zeros(t_steps, n_od);

    let mut cur = env.reset(env_seed);
    for t in 0..t_steps {
        let out = params.forward(&cur);
        let action = sample_action(&out.logits, act_rng);
        let (lp, _) = log_prob_and_entropy(&out.logits, &action);
        let step = env.step(&action)?;
        obs.push(cur);
        bits.push(action.clone());
        logp.push(lp);
        values.push(out.value);
        rewards.push(step.reward);
        trajectory.bits[t] = action;
        cur = step.observation;
        debug_assert_eq!(step.done, t + 1 == t_steps);
    }
    values.push(0.0); // horizon bootstrap
    let error = rewards.iter().map(|r| -r).sum::<f64>();
    let table = env.interval_history().to_vec();
    Ok(EpisodeRollout { obs, bits, logp, values, rewards, table, trajectory, error })
}

/// Trains a policy against the environment's ground truth and returns the
/// best trajectory seen during collection, judged by undiscounted error.
/// Running scale of the discounted return. Each step folds its reward into
/// a per-episode discounted accumulator whose variance is tracked across
/// all of training (Welford); rewards entering GAE are divided by the
/// accumulator's standard deviation and clipped. This keeps value targets
/// near unit scale whatever the task's count magnitudes are, so the value
/// loss cannot drown the policy gradient. Raw rewards are still what the
/// episode history reports.
struct ReturnNormalizer {
    gamma: f64,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnNormalizer {
    const CLIP: f64 = 10.0;

    fn new(gamma: f64) -> Self {
        ReturnNormalizer { gamma, count: 0.0, mean: 0.0, m2: 0.0 }
    }

    fn observe(&mut self, rewards: &[f64]) {
        let mut ret = 0.0;
        for &r in rewards {
            ret = self.gamma * ret + r;
            self.count += 1.0;
            let d = ret - self.mean;
            self.mean += d / self.count;
            self.m2 += d * (ret - self.mean);
        }
    }

    fn scale(&self, rewards: &[f64]) -> Vec<f64> {
        let var = if self.count > 0.0 { self.m2 / self.count } else { 0.0 };
        let sd = (var + 1e-8).sqrt();
        rewards.iter().map(|&r| (r / sd).clamp(-Self::CLIP, Self::CLIP)).collect()
    }
}

/// A zero-episode budget still reports one untrained rollout so the caller
/// always gets a usable result.
pub fn train(
    env_cfg: &Arc<EnvConfig>,
    cfg: &PpoConfig,
    seed: u64,
    save_dir: Option<&Path>,
) -> Result<CalibrationResult, PpoError> {
    env_cfg.validate()?;
    let mut init_rng = substream(seed, "init");
    let mut params =
        MlpParams::init(env_cfg.obs_dim(), cfg.hidden_dim, env_cfg.n_od(), &mut init_rng);
    let mut adam = AdamState::new(params.theta.len());
    let (mut env, _) = Env::new(Arc::clone(env_cfg), seed)?;
    let gamma = env_cfg.gamma;

    let mut best: Option<(f64, Trajectory, Vec<Vec<u32>>)> = None;
    let mut history = Vec::new();
    let mut episode: u32 = 0;
    let mut update: u64 = 0;

    let track_best =
        |ep: &EpisodeRollout, best: &mut Option<(f64, Trajectory, Vec<Vec<u32>>)>| {
            if best.as_ref().map(|(e, _, _)| ep.error < *e).unwrap_or(true) {
                *best = Some((ep.error, ep.trajectory.clone(), ep.table.clone()));
            }
        };

    if cfg.budget_episodes == 0 {
        let mut act_rng = substream(seed, "train/ep0/act");
        let ep = collect_episode(&mut env, &params, subseed(seed, "train/ep0/env"), &mut act_rng)?;
        track_best(&ep, &mut best);
    }

    let mut ret_norm = ReturnNormalizer::new(gamma);
    while episode < cfg.budget_episodes {
        let take = cfg.episodes_per_update.min(cfg.budget_episodes - episode);
        let mut batch = RolloutBatch::default();
        let mut collected = Vec::with_capacity(take as usize);
        for _ in 0..take {
            let env_seed = subseed(seed, &format!("train/ep{episode}/env"));
            let mut act_rng = substream(seed, &format!("train/ep{episode}/act"));
            let ep = collect_episode(&mut env, &params, env_seed, &mut act_rng)?;
            history.push(EpisodeStat {
                episode,
                error: ep.error,
                discounted_return: episode_return(&ep.rewards, gamma),
            });
            track_best(&ep, &mut best);
            episode += 1;
            collected.push(ep);
        }
        // The squared-count rewards span orders of magnitude across tasks,
        // so the critic sees rewards divided by the running scale of the
        // discounted return; reported errors and returns stay raw.
        for ep in &collected {
            ret_norm.observe(&ep.rewards);
        }
        for ep in collected {
            let scaled = ret_norm.scale(&ep.rewards);
            let dones = {
                let mut d = vec![false; ep.rewards.len()];
                *d.last_mut().expect("nonempty episode") = true;
                d
            };
            let (adv, targets) = compute_gae(&scaled, &ep.values, &dones, gamma, cfg.lambda);

            batch.obs.extend(ep.obs);
            batch.bits.extend(ep.bits);
            batch.old_logp.extend(ep.logp);
            batch.advantages.extend(adv);
            batch.value_targets.extend(targets);
        }
        batch.normalize_advantages();

        let mut indices: Vec<usize> = (0..batch.len()).collect();
        for e in 0..cfg.epochs {
            let mut shuffle_rng = substream(seed, &format!("train/shuffle/u{update}/e{e}"));
            indices.shuffle(&mut shuffle_rng);
            for chunk in indices.chunks(cfg.minibatch.max(1)) {
                let (terms, mut grad) = ppo_loss(&params, &batch, chunk, cfg);
                if !terms.total.is_finite() {
                    return Err(PpoError::NonFinite { what: "loss", update });
                }
                clip_grad_norm(&mut grad, cfg.grad_clip);
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(PpoError::NonFinite { what: "gradient", update });
                }
                adam_update(&mut params.theta, &grad, &mut adam, &cfg.adam);
            }
        }
        update += 1;
    }

    let checkpoint = match save_dir {
        Some(dir) => {
            let path = dir.join("policy.ckpt");
            params.save_checkpoint(&path)?;
            Some(path)
        }
        None => None,
    };

    let (best_error, best_trajectory, rows) = best.expect("at least one episode always runs");
    Ok(CalibrationResult {
        best_trajectory,
        best_error,
        best_table: GroundTruthTable { rows },
        episodes: history,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LinkSpec, NetworkSpec};
    use rand::Rng;

    /// Tiny three-link, one-detector environment that keeps episodes short.
    fn tiny_env(truth_rows: Vec<Vec<u32>>) -> Arc<EnvConfig> {
        let links: Vec<LinkSpec> = (0..3)
            .map(|i| LinkSpec {
                id: i,
                from_node: i as u32 + 1,
                to_node: i as u32 + 2,
                length: 120.0,
                free_flow_speed: 13.89,
                lane_count: 1,
                has_detector: false,
            })
            .collect();
        let net = NetworkSpec::new(links, vec![(1, 4), (2, 4)], vec![1]).unwrap();
        let mut cfg = EnvConfig::with_defaults(net, GroundTruthTable { rows: truth_rows });
        cfg.t_steps = 20;
        cfg.inputs_per_output = 10;
        Arc::new(cfg)
    }

    fn small_ppo() -> PpoConfig {
        PpoConfig {
            hidden_dim: 16,
            minibatch: 40,
            episodes_per_update: 2,
            epochs: 3,
            budget_episodes: 6,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn gae_hand_case() {
        // gamma = lambda = 1: rewards [0, 1], values [0.5, 0.5, 0].
        let (adv, targets) =
            compute_gae(&[0.0, 1.0], &[0.5, 0.5, 0.0], &[false, true], 1.0, 1.0);
        assert!((adv[0] - 0.5).abs() < 1e-12);
        assert!((adv[1] - 0.5).abs() < 1e-12);
        assert!((targets[0] - 1.0).abs() < 1e-12);
        assert!((targets[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_telescopes_to_discounted_return_at_lambda_one() {
        // With lambda = 1 the advantage telescopes to the discounted
        // return-to-go minus the value baseline; check on random sequences.
        let mut rng = crate::rng::substream(3, "test/gae");
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let gamma: f64 = rng.gen_range(0.5..1.0);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut values: Vec<f64> = (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            *values.last_mut().unwrap() = 0.0;
            let mut dones = vec![false; n];
            dones[n - 1] = true;
            let (adv, targets) = compute_gae(&rewards, &values, &dones, gamma, 1.0);
            let mut ret = 0.0;
            for t in (0..n).rev() {
                ret = rewards[t] + gamma * ret * if dones[t] { 0.0 } else { 1.0 };
                assert!((adv[t] - (ret - values[t])).abs() < 1e-10, "t={t}");
                assert!((targets[t] - ret).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn clip_objective_hand_cases() {
        // Positive advantage caps the upside at (1+eps)*A.
        assert!((clip_objective(1.3, 1.0, 0.2) - 1.2).abs() < 1e-12);
        // Negative advantage keeps the more pessimistic unclipped branch.
        assert!((clip_objective(1.3, -1.0, 0.2) - (-1.3)).abs() < 1e-12);
        // Inside the trust region both branches agree exactly.
        assert!((clip_objective(1.05, 0.7, 0.2) - 1.05 * 0.7).abs() < 1e-12);
        assert!((clip_objective(0.9, -0.4, 0.2) - (0.9 * -0.4)).abs() < 1e-12);
        // Ratio below 1-eps with positive advantage is not clipped (min).
        assert!((clip_objective(0.5, 1.0, 0.2) - 0.5).abs() < 1e-12);
        // ... but with negative advantage it is.
        assert!((clip_objective(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-12);
    }

    fn random_batch(params: &MlpParams, n: usize, seed: u64) -> RolloutBatch {
        let mut rng = crate::rng::substream(seed, "test/ppo-batch");
        let mut batch = RolloutBatch::default();
        for _ in 0..n {
            let obs: Vec<f64> =
                (0..params.in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bits: Vec<bool> = (0..params.n_od).map(|_| rng.gen_bool(0.5)).collect();
            // Old log-probs near but not equal to the current policy's.
            let out = params.forward(&obs);
            let (lp, _) = log_prob_and_entropy(&out.logits, &bits);
            batch.obs.push(obs);
            batch.bits.push(bits);
            batch.old_logp.push(lp + rng.gen_range(-0.3..0.3));
            batch.advantages.push(rng.gen_range(-2.0..2.0));
            batch.value_targets.push(rng.gen_range(-2.0..2.0));
        }
        batch
    }

    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        let mut rng = crate::rng::substream(5, "test/ppo-grad-init");
        let params = MlpParams::init(6, 8, 3, &mut rng);
        let batch = random_batch(&params, 12, 7);
        let cfg = PpoConfig { hidden_dim: 8, ..PpoConfig::default() };
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (_, grad) = ppo_loss(&params, &batch, &indices, &cfg);

        let eps = 1e-6;
        let n = params.theta.len();
        for k in 0..30 {
            let idx = (k * 53) % n;
            let mut plus = params.clone();
            plus.theta[idx] += eps;
            let mut minus = params.clone();
            minus.theta[idx] -= eps;
            let (lp, _) = ppo_loss(&plus, &batch, &indices, &cfg);
            let (lm, _) = ppo_loss(&minus, &batch, &indices, &cfg);
            let fd = (lp.total - lm.total) / (2.0 * eps);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-7);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn ppo_loss_flags_poisoned_batch() {
        let mut rng = crate::rng::substream(6, "test/ppo-poison");
        let params = MlpParams::init(6, 8, 3, &mut rng);
        let mut batch = random_batch(&params, 4, 8);
        batch.advantages[2] = f64::NAN;
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (terms, _) = ppo_loss(&params, &batch, &indices, &cfg_of(8));
        assert!(!terms.total.is_finite());
    }

    fn cfg_of(hidden: usize) -> PpoConfig {
        PpoConfig { hidden_dim: hidden, ..PpoConfig::default() }
    }

    #[test]
    fn grad_norm_clip_scales_only_above_threshold() {
        let mut g = vec![3.0, 4.0]; // norm 5
        let norm = clip_grad_norm(&mut g, 0.5);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((new_norm - 0.5).abs() < 1e-12);
        let mut small = vec![0.1, 0.2];
        let before = small.clone();
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small, before);
    }

    #[test]
    fn advantage_normalization_is_zero_mean_unit_std() {
        let mut batch = RolloutBatch::default();
        batch.advantages = vec![1.0, 2.0, 3.0, 4.0];
        batch.normalize_advantages();
        let mean: f64 = batch.advantages.iter().sum::<f64>() / 4.0;
        let var: f64 = batch.advantages.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn train_runs_and_tracks_best_episode() {
        let env_cfg = tiny_env(vec![vec![1], vec![0]]);
        let result = train(&env_cfg, &small_ppo(), 42, None).unwrap();
        assert_eq!(result.episodes.len(), 6);
        let min_err =
            result.episodes.iter().map(|s| s.error).fold(f64::INFINITY, f64::min);
        assert_eq!(result.best_error, min_err);
        assert_eq!(result.best_trajectory.t_steps(), 20);
        assert_eq!(result.best_trajectory.n_od(), 2);
        assert_eq!(result.best_table.k_intervals(), 2);
        assert!(result.checkpoint.is_none());
    }

    #[test]
    fn train_is_deterministic_in_seed() {
        let env_cfg = tiny_env(vec![vec![1], vec![0]]);
        let a = train(&env_cfg, &small_ppo(), 9, None).unwrap();
        let b = train(&env_cfg, &small_ppo(), 9, None).unwrap();
        assert_eq!(a.best_error, b.best_error);
        assert_eq!(a.best_trajectory, b.best_trajectory);
        assert_eq!(a.episodes, b.episodes);
        let c = train(&env_cfg, &small_ppo(), 10, None).unwrap();
        assert!(a.episodes != c.episodes, "different seeds should differ");
    }

    #[test]
    fn zero_budget_still_produces_a_result() {
        let env_cfg = tiny_env(vec![vec![1], vec![0]]);
        let cfg = PpoConfig { budget_episodes: 0, ..small_ppo() };
        let result = train(&env_cfg, &cfg, 4, None).unwrap();
        assert!(result.episodes.is_empty());
        assert!(result.best_error.is_finite());
        assert_eq!(result.best_trajectory.t_steps(), 20);
    }

    #[test]
    fn checkpoint_is_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let env_cfg = tiny_env(vec![vec![0], vec![0]]);
        let cfg = PpoConfig { budget_episodes: 2, ..small_ppo() };
        let result = train(&env_cfg, &cfg, 1, Some(dir.path())).unwrap();
        let path = result.checkpoint.expect("checkpoint requested");
        let params = MlpParams::load_checkpoint(&path).unwrap();
        assert_eq!(params.in_dim, env_cfg.obs_dim());
        assert_eq!(params.n_od, 2);
    }

    #[test]
    fn training_reduces_error_on_quiet_truth() {
        // With all-zero truth the optimal policy dispatches nothing. A short
        // run must already push the average error well below the untrained
        // baseline.
        let env_cfg = tiny_env(vec![vec![0], vec![0]]);
        let cfg = PpoConfig {
            budget_episodes: 160,
            episodes_per_update: 4,
            epochs: 4,
            minibatch: 80,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            ..small_ppo()
        };
        let result = train(&env_cfg, &cfg, 11, None).unwrap();
        let head: f64 =
            result.episodes[..8].iter().map(|s| s.error).sum::<f64>() / 8.0;
        let tail: f64 =
            result.episodes[152..].iter().map(|s| s.error).sum::<f64>() / 8.0;
        assert!(
            tail < head / 4.0,
            "training should reduce error: head {head}, tail {tail}"
        );
        assert_eq!(result.best_error, 0.0, "a quiet episode should appear");
        assert!(
            result.best_error.is_sign_positive(),
            "error is normalized to +0"
        );
    }
}
