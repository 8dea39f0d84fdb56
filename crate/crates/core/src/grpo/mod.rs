//! Group-relative policy optimization: normalized group advantages, the
//! per-token KL estimator, the group objective, and a tabular toy trainer.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::structured_output::Completion;

pub mod toy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_completion_length: usize,
    pub epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coeff: 0.04,
            learning_rate: 1e-5,
            batch_size: 128,
            max_completion_length: 512,
            epsilon: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return contract(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return contract(format!("kl_coeff must be non-negative, got {}", self.kl_coeff));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return contract(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_completion_length == 0 {
            return contract("batch_size and max_completion_length must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return contract(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

fn mean_std(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r_i − r̄)/σ_r` with the population standard deviation; all zeros when
/// `σ_r ≤ ε`.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return contract(format!("group needs at least 2 rewards, got {}", rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "rewards".into(),
        });
    }
    let (mean, std) = mean_std(rewards);
    if std <= epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token `exp(ref − cur) − (ref − cur) − 1`, summed over the sequence.
pub fn kl_penalty(logprobs: &[f64], ref_logprobs: &[f64]) -> Result<f64> {
    if logprobs.len() != ref_logprobs.len() {
        return contract(format!(
            "logprob lengths differ: {} vs {}",
            logprobs.len(),
            ref_logprobs.len()
        ));
    }
    let mut total = 0.0;
    for (&c, &r) in logprobs.iter().zip(ref_logprobs) {
        if !c.is_finite() || !r.is_finite() {
            return Err(Error::NonFinite {
                tensor: "logprobs".into(),
            });
        }
        let d = r - c;
        total += d.exp_m1() - d;
    }
    Ok(total.max(0.0))
}

/// Derivative of one token's KL term with respect to its current logprob.
pub fn kl_token_grad(cur: f64, reference: f64) -> f64 {
    -(reference - cur).exp_m1()
}

/// One prompt's group of completions with rewards, advantages and
/// token-level log-probabilities under the current and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub prompt_id: String,
    pub completions: Vec<Completion>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    pub token_logprobs: Vec<Vec<f64>>,
    pub ref_token_logprobs: Vec<Vec<f64>>,
}

impl GroupRollout {
    pub fn new(
        prompt_id: impl Into<String>,
        completions: Vec<Completion>,
        rewards: Vec<f64>,
        token_logprobs: Vec<Vec<f64>>,
        ref_token_logprobs: Vec<Vec<f64>>,
        epsilon: f64,
    ) -> Result<Self> {
        let g = rewards.len();
        if completions.len() != g || token_logprobs.len() != g || ref_token_logprobs.len() != g {
            return contract(format!(
                "group lists differ in length: {} completions, {g} rewards, {} logprob rows, {} reference rows",
                completions.len(),
                token_logprobs.len(),
                ref_token_logprobs.len()
            ));
        }
        let advantages = group_advantages(&rewards, epsilon)?;
        let (mean, std) = mean_std(&rewards);
        let group = Self {
            prompt_id: prompt_id.into(),
            completions,
            rewards,
            mean,
            std,
            advantages,
            token_logprobs,
            ref_token_logprobs,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Sequence log-probability of completion `i` under the current policy.
    pub fn logprob(&self, i: usize) -> f64 {
        self.token_logprobs[i].iter().sum()
    }

    pub fn ref_logprob(&self, i: usize) -> f64 {
        self.ref_token_logprobs[i].iter().sum()
    }

    pub fn kl(&self, i: usize) -> Result<f64> {
        kl_penalty(&self.token_logprobs[i], &self.ref_token_logprobs[i])
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.rewards.len();
        if g < 2 {
            return contract("group needs at least 2 completions");
        }
        let lens = [
            self.completions.len(),
            self.advantages.len(),
            self.token_logprobs.len(),
            self.ref_token_logprobs.len(),
        ];
        if lens.iter().any(|&l| l != g) {
            return contract(format!("group lists differ in length (G = {g}): {lens:?}"));
        }
        for (i, (a, b)) in self.token_logprobs.iter().zip(&self.ref_token_logprobs).enumerate() {
            if a.len() != b.len() {
                return contract(format!(
                    "completion {i}: {} current vs {} reference token logprobs",
                    a.len(),
                    b.len()
                ));
            }
        }
        Ok(())
    }
}

/// `(1/G) Σ_i [−Â_i · log π(y_i) + β · KL_i]`.
pub fn grpo_loss(group: &GroupRollout, cfg: &GrpoConfig) -> Result<f64> {
    group.validate()?;
    let g = group.len() as f64;
    let mut total = 0.0;
    for i in 0..group.len() {
        total += -group.advantages[i] * group.logprob(i) + cfg.kl_coeff * group.kl(i)?;
    }
    let loss = total / g;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "grpo loss".into(),
        });
    }
    Ok(loss)
}

/// `∂loss/∂logπ(token)` for every token of every completion.
pub fn grpo_token_grads(group: &GroupRollout, cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>> {
    group.validate()?;
    let g = group.len() as f64;
    Ok((0..group.len())
        .map(|i| {
            group.token_logprobs[i]
                .iter()
                .zip(&group.ref_token_logprobs[i])
                .map(|(&c, &r)| (-group.advantages[i] + cfg.kl_coeff * kl_token_grad(c, r)) / g)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_advantages() {
        assert_eq!(group_advantages(&[1.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[0.3; 8], 1e-8).unwrap(), vec![0.0; 8]);
        assert!(group_advantages(&[1.0], 1e-8).is_err());
        assert!(group_advantages(&[1.0, f64::NAN], 1e-8).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_penalty(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let v = kl_penalty(&[0.0], &[2f64.ln()]).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.3069).abs() < 1e-4);
        assert!(kl_penalty(&[0.0], &[0.0, 1.0]).is_err());
        assert!(kl_penalty(&[f64::INFINITY], &[0.0]).is_err());
    }

    fn group(adv_rewards: Vec<f64>, cur: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> GroupRollout {
        let n = adv_rewards.len();
        GroupRollout::new(
            "p",
            vec![Completion::from_text("x"); n],
            adv_rewards,
            cur,
            reference,
            1e-8,
        )
        .unwrap()
    }

    #[test]
    fn zero_advantage_loss_is_kl_only() {
        let g = group(
            vec![0.5, 0.5],
            vec![vec![-1.0, -0.5], vec![-0.2]],
            vec![vec![-0.7, -0.5], vec![-0.9]],
        );
        let cfg = GrpoConfig::default();
        let kl = (g.kl(0).unwrap() + g.kl(1).unwrap()) / 2.0;
        assert!((grpo_loss(&g, &cfg).unwrap() - cfg.kl_coeff * kl).abs() < 1e-15);
    }

    #[test]
    fn positive_advantage_pushes_logprob_up() {
        let g = group(vec![1.0, 0.0], vec![vec![-1.0], vec![-1.0]], vec![vec![-1.0], vec![-1.0]]);
        let cfg = GrpoConfig {
            kl_coeff: 0.0,
            ..GrpoConfig::default()
        };
        let grads = grpo_token_grads(&g, &cfg).unwrap();
        // gradient descent moves logπ against the gradient
        assert!(grads[0][0] < 0.0);
        assert!(grads[1][0] > 0.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let r = GroupRollout::new(
            "p",
            vec![Completion::from_text("x")],
            vec![1.0, 0.0],
            vec![vec![], vec![]],
            vec![vec![], vec![]],
            1e-8,
        );
        assert!(r.is_err());
        let r = GroupRollout::new(
            "p",
            vec![Completion::from_text("x"); 2],
            vec![1.0, 0.0],
            vec![vec![0.0], vec![]],
            vec![vec![], vec![]],
            1e-8,
        );
        assert!(r.is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = GrpoConfig::default();
        assert_eq!((c.group_size, c.batch_size, c.max_completion_length), (8, 128, 512));
        assert_eq!(c.learning_rate, 1e-5);
        c.validate().unwrap();
        assert!(GrpoConfig { group_size: 1, ..c.clone() }.validate().is_err());
        assert!(GrpoConfig { kl_coeff: -0.1, ..c }.validate().is_err());
    }
}
