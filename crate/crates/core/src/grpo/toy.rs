//! Tabular toy policy and synthetic tasks for exercising reward shaping
//! end to end without a neural model.
//!
//! The policy holds one categorical distribution per (context, position)
//! whose logits are a shared per-position table plus a per-context offset;
//! positions are sampled independently until `<eos>` or the length limit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grpo_loss, grpo_token_grads, GroupRollout, GrpoConfig};
use crate::attention::{foreground_mask, foreground_score, minmax_normalize, nearest_resize, AttentionGrid, ForegroundMask};
use crate::error::{contract, Error, Result};
use crate::rule_rewards::{mcq_accuracy_reward, rubric_reward, GoldLabels, RubricComponents, Stopwords};
use crate::scoring::{mcq_rubric_components, Component, ComponentValues, RewardSelector};
use crate::structured_output::{format_reward, parse_text, Completion};

pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vec<String>,
    eos: usize,
    shared: Array2<f64>,
    logits: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySample {
    /// Sampled token ids, including a trailing `<eos>` when one was drawn.
    pub tokens: Vec<usize>,
    pub completion: Completion,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ToyPolicy {
    /// Uniform policy; `<eos>` is appended to the vocabulary when absent.
    pub fn uniform(mut vocab: Vec<String>, n_contexts: usize, max_length: usize) -> Result<Self> {
        if n_contexts == 0 || max_length == 0 {
            return contract("toy policy needs at least one context and one position");
        }
        let eos = match vocab.iter().position(|v| v == EOS) {
            Some(i) => i,
            None => {
                vocab.push(EOS.to_string());
                vocab.len() - 1
            }
        };
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = vocab.iter().find(|v| !seen.insert(v.as_str())) {
            return contract(format!("duplicate vocabulary symbol {dup:?}"));
        }
        let v = vocab.len();
        Ok(Self {
            vocab,
            eos,
            shared: Array2::zeros((max_length, v)),
            logits: Array3::zeros((n_contexts, max_length, v)),
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.dim().0
    }

    pub fn max_length(&self) -> usize {
        self.logits.dim().1
    }

    /// Per-context offsets `[ctx × pos × vocab]`.
    pub fn logits(&self) -> &Array3<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array3<f64> {
        &mut self.logits
    }

    /// Shared table `[pos × vocab]` added to every context.
    pub fn shared(&self) -> &Array2<f64> {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut Array2<f64> {
        &mut self.shared
    }

    /// Applies `θ ← θ − scale·grad` to both tables for context `ctx`.
    pub fn apply_grad(&mut self, ctx: usize, grad: &Array2<f64>, scale: f64) {
        self.shared.scaled_add(-scale, grad);
        self.logits
            .slice_mut(ndarray::s![ctx, .., ..])
            .scaled_add(-scale, grad);
    }

    pub fn token_id(&self, symbol: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == symbol)
    }

    pub fn probs(&self, ctx: usize, pos: usize) -> Vec<f64> {
        let row: Vec<f64> = self
            .shared
            .row(pos)
            .iter()
            .zip(self.logits.slice(ndarray::s![ctx, pos, ..]))
            .map(|(a, b)| a + b)
            .collect();
        softmax(&row)
    }

    pub fn sample<R: Rng>(&self, ctx: usize, rng: &mut R) -> Vec<usize> {
        let mut tokens = Vec::new();
        for pos in 0..self.max_length() {
            let probs = self.probs(ctx, pos);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            // guard against rounding landing on a zero-probability tail symbol
            while probs[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            tokens.push(pick);
            if pick == self.eos {
                break;
            }
        }
        tokens
    }

    /// `g` independent completions; completion `i` uses stream `i` of a
    /// ChaCha8 generator seeded with `seed`.
    pub fn sample_group(&self, ctx: usize, g: usize, seed: u64) -> Vec<ToySample> {
        (0..g)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let tokens = self.sample(ctx, &mut rng);
                let completion = self.render(&tokens);
                ToySample { tokens, completion }
            })
            .collect()
    }

    /// Text with symbols joined by spaces; `<eos>` is not rendered.
    pub fn render(&self, tokens: &[usize]) -> Completion {
        let words: Vec<&str> = tokens
            .iter()
            .filter(|&&t| t != self.eos)
            .map(|&t| self.vocab[t].as_str())
            .collect();
        Completion::new(words.join(" "), words.len())
    }

    pub fn token_logprobs(&self, ctx: usize, tokens: &[usize]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| self.probs(ctx, pos)[t].ln())
            .collect()
    }

    /// Σ over positions of KL(π ‖ ref) for context `ctx`: the exact KL of
    /// the untruncated positional product distribution.
    pub fn exact_kl(&self, reference: &ToyPolicy, ctx: usize) -> f64 {
        (0..self.max_length())
            .map(|pos| {
                let p = self.probs(ctx, pos);
                let q = reference.probs(ctx, pos);
                p.iter()
                    .zip(&q)
                    .filter(|(&pi, _)| pi > 0.0)
                    .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Builds the group rollout for `samples` with their rewards.
    pub fn group_rollout(
        &self,
        reference: &ToyPolicy,
        ctx: usize,
        prompt_id: &str,
        samples: &[ToySample],
        rewards: Vec<f64>,
        epsilon: f64,
    ) -> Result<GroupRollout> {
        GroupRollout::new(
            prompt_id,
            samples.iter().map(|s| s.completion.clone()).collect(),
            rewards,
            samples.iter().map(|s| self.token_logprobs(ctx, &s.tokens)).collect(),
            samples.iter().map(|s| reference.token_logprobs(ctx, &s.tokens)).collect(),
            epsilon,
        )
    }

    /// Chain rule from per-token `∂loss/∂logπ` to the `[pos × vocab]`
    /// logits of context `ctx`: `∂logπ_t/∂θ_v = 1[v = t] − π_v`. The same
    /// gradient applies to the shared table and the context offsets.
    pub fn logit_grad(&self, ctx: usize, samples: &[ToySample], token_grads: &[Vec<f64>]) -> Array2<f64> {
        let mut grad = Array2::zeros((self.max_length(), self.vocab.len()));
        for (s, gs) in samples.iter().zip(token_grads) {
            for (pos, (&tok, &g)) in s.tokens.iter().zip(gs).enumerate() {
                let probs = self.probs(ctx, pos);
                for (v, p) in probs.iter().enumerate() {
                    let indicator = if v == tok { 1.0 } else { 0.0 };
                    grad[[pos, v]] += g * (indicator - p);
                }
            }
        }
        grad
    }

    /// GRPO loss of one group and its gradient with respect to the logits
    /// of `ctx`, with samples and rewards held fixed.
    pub fn loss_and_grad(
        &self,
        reference: &ToyPolicy,
        ctx: usize,
        samples: &[ToySample],
        rewards: &[f64],
        cfg: &GrpoConfig,
    ) -> Result<(f64, Array2<f64>)> {
        let rollout = self.group_rollout(reference, ctx, "", samples, rewards.to_vec(), cfg.epsilon)?;
        let loss = grpo_loss(&rollout, cfg)?;
        let grads = grpo_token_grads(&rollout, cfg)?;
        Ok((loss, self.logit_grad(ctx, samples, &grads)))
    }
}

/// Synthetic training tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyTask {
    /// Emit the four tag pairs; only structure is scored.
    Format,
    /// Multiple choice where the answer is `A` for an even number of set
    /// prompt bits and `B` otherwise. Gold unit `m/s`, gold principle
    /// `<even|odd> parity rule`.
    ParityMcq { bits: u32 },
    /// Each emitted cell token is a one-hot "attention" grid over a
    /// `grid_side²` patch grid, scored against a synthetic image per prompt.
    Grounding {
        grid_side: usize,
        image_side: usize,
        images: usize,
    },
}

const TAG_SYMBOLS: [&str; 8] = [
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "<unit>",
    "</unit>",
    "<principle>",
    "</principle>",
];

impl ToyTask {
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        match self {
            ToyTask::Format => {
                v.extend(TAG_SYMBOLS.iter().map(|s| s.to_string()));
                v.push("w".into());
            }
            ToyTask::ParityMcq { .. } => {
                v.extend(TAG_SYMBOLS.iter().map(|s| s.to_string()));
                for s in ["A", "B", "C", "D", "w", "m/s", "kg", "even", "odd", "parity", "rule"] {
                    v.push(s.into());
                }
            }
            ToyTask::Grounding { grid_side, .. } => {
                v.extend((0..grid_side * grid_side).map(|i| format!("p{i}")));
            }
        }
        v.push(EOS.into());
        v
    }

    pub fn n_contexts(&self) -> usize {
        match self {
            ToyTask::Format => 1,
            ToyTask::ParityMcq { bits } => 1usize << bits,
            ToyTask::Grounding { images, .. } => *images,
        }
    }

    /// Longest completion the task needs, `<eos>` included.
    pub fn max_length(&self) -> usize {
        match self {
            ToyTask::Format => 10,
            ToyTask::ParityMcq { .. } => 14,
            ToyTask::Grounding { .. } => 4,
        }
    }

    pub fn components(&self) -> &'static [Component] {
        match self {
            ToyTask::Format => &[Component::Fmt],
            ToyTask::ParityMcq { .. } => &[Component::Fmt, Component::Acc, Component::Rubric],
            ToyTask::Grounding { .. } => &[Component::Asm],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyTask::Format => Ok(()),
            ToyTask::ParityMcq { bits } => {
                if (1..=8).contains(bits) {
                    Ok(())
                } else {
                    contract(format!("parity bits must be 1..=8, got {bits}"))
                }
            }
            ToyTask::Grounding {
                grid_side,
                image_side,
                images,
            } => {
                if *grid_side == 0 || *images == 0 || image_side < grid_side {
                    contract("grounding task needs grid_side ≥ 1, images ≥ 1 and image_side ≥ grid_side")
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn prompt_id(&self, ctx: usize) -> String {
        match self {
            ToyTask::Format => "format".into(),
            ToyTask::ParityMcq { bits } => format!("parity-{ctx:0width$b}", width = *bits as usize),
            ToyTask::Grounding { .. } => format!("image-{ctx}"),
        }
    }
}

/// Synthetic image for grounding context `ctx`: a dark rectangle whose
/// position and size depend on the context, on a white field.
pub fn grounding_image(ctx: usize, grid_side: usize, image_side: usize) -> RgbImage {
    let cell = image_side as f64 / grid_side as f64;
    let cells = grid_side * grid_side;
    let anchor = (ctx * 7 + 3) % cells;
    let (r0, c0) = (anchor / grid_side, anchor % grid_side);
    let span = 1 + ctx % 2.min(grid_side);
    let (r1, c1) = ((r0 + span).min(grid_side), (c0 + span).min(grid_side));
    let (y0, y1) = ((r0 as f64 * cell) as u32, (r1 as f64 * cell) as u32);
    let (x0, x1) = ((c0 as f64 * cell) as u32, (c1 as f64 * cell) as u32);
    RgbImage::from_fn(image_side as u32, image_side as u32, |x, y| {
        if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            Rgb([30, 60, 160])
        } else {
            Rgb([255, 255, 255])
        }
    })
}

/// Task plus everything precomputed for scoring.
pub struct TaskEnv {
    pub task: ToyTask,
    stopwords: Stopwords,
    golds: Vec<GoldLabels>,
    masks: Vec<ForegroundMask>,
}

/// Component rewards for one toy completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub values: ComponentValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric: Option<RubricComponents>,
}

impl TaskEnv {
    pub fn new(task: ToyTask) -> Result<Self> {
        task.validate()?;
        let n = task.n_contexts();
        let golds = match &task {
            ToyTask::ParityMcq { .. } => (0..n)
                .map(|ctx| {
                    let even = ctx.count_ones() % 2 == 0;
                    GoldLabels::mcq(
                        if even { "A" } else { "B" },
                        "m/s",
                        if even { "even parity rule" } else { "odd parity rule" },
                    )
                })
                .collect(),
            _ => Vec::new(),
        };
        let masks = match &task {
            ToyTask::Grounding {
                grid_side, image_side, ..
            } => (0..n)
                .map(|ctx| foreground_mask(&grounding_image(ctx, *grid_side, *image_side), 230))
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            task,
            stopwords: Stopwords::default_v1(),
            golds,
            masks,
        })
    }

    pub fn gold(&self, ctx: usize) -> Option<&GoldLabels> {
        self.golds.get(ctx)
    }

    pub fn score(&self, policy: &ToyPolicy, ctx: usize, sample: &ToySample) -> Result<SampleScore> {
        match &self.task {
            ToyTask::Format => {
                let parsed = parse_text(&sample.completion.text);
                Ok(SampleScore {
                    values: ComponentValues {
                        fmt: Some(format_reward(&parsed)),
                        ..Default::default()
                    },
                    rubric: None,
                })
            }
            ToyTask::ParityMcq { .. } => {
                let parsed = parse_text(&sample.completion.text);
                let gold = &self.golds[ctx];
                let comps = mcq_rubric_components(&parsed, gold, &sample.completion, &self.stopwords)?;
                Ok(SampleScore {
                    values: ComponentValues {
                        fmt: Some(format_reward(&parsed)),
                        acc: Some(mcq_accuracy_reward(&parsed, gold)?),
                        rubric: Some(rubric_reward(&comps)?.score),
                        asm: None,
                    },
                    rubric: Some(comps),
                })
            }
            ToyTask::Grounding { grid_side, .. } => {
                let mask = &self.masks[ctx];
                let (h, w) = mask.dim();
                let mut per_token = Vec::new();
                for &t in sample.tokens.iter().filter(|&&t| t != policy.eos()) {
                    let mut grid = Array2::zeros((*grid_side, *grid_side));
                    grid[[t / grid_side, t % grid_side]] = 1.0;
                    let norm = minmax_normalize(&AttentionGrid::raw(grid));
                    per_token.push(foreground_score(&nearest_resize(&norm.values, h, w)?, mask)?);
                }
                let asm = if per_token.is_empty() {
                    0.0
                } else {
                    per_token.iter().sum::<f64>() / per_token.len() as f64
                };
                Ok(SampleScore {
                    values: ComponentValues {
                        asm: Some(asm),
                        ..Default::default()
                    },
                    rubric: None,
                })
            }
        }
    }
}

/// Declarative toy-training experiment. `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub task: ToyTask,
    pub reward: RewardSelector,
    #[serde(default)]
    pub grpo: GrpoConfig,
    /// Log every completion with its component rewards.
    #[serde(default)]
    pub record_samples: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.task.validate()?;
        for c in self.reward.components() {
            if !self.task.components().contains(&c) {
                return Err(Error::Config(format!(
                    "reward component {} is not produced by the {:?} task",
                    c.name(),
                    self.task
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn build_policy(&self) -> Result<ToyPolicy> {
        let len = self.task.max_length().min(self.grpo.max_completion_length);
        ToyPolicy::uniform(self.task.vocabulary(), self.task.n_contexts(), len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt_id: String,
    pub text: String,
    pub token_count: usize,
    pub values: ComponentValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric: Option<RubricComponents>,
    pub combined: f64,
    pub advantage: f64,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Batch means of each available component (and rubric parts `r_*`).
    pub components: BTreeMap<String, f64>,
    pub mean_length: f64,
    /// Mean per-completion sampled KL estimate.
    pub kl: f64,
    /// Mean over contexts of the exact positional KL to the reference.
    pub exact_kl: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampleRecord>>,
}

struct GroupOutcome {
    ctx: usize,
    grad: Array2<f64>,
    loss: f64,
    kl_sum: f64,
    length_sum: usize,
    rewards: Vec<f64>,
    scores: Vec<SampleScore>,
    samples: Option<Vec<SampleRecord>>,
}

fn run_group(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    env: &TaskEnv,
    cfg: &TrainConfig,
    step: usize,
    b: usize,
) -> Result<GroupOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((step * cfg.grpo.batch_size + b) as u64);
    let ctx = rng.random_range(0..policy.n_contexts());
    let samples = policy.sample_group(ctx, cfg.grpo.group_size, rng.random());
    let scores: Vec<SampleScore> = samples
        .iter()
        .map(|s| env.score(policy, ctx, s))
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = scores
        .iter()
        .map(|s| cfg.reward.combine(&s.values))
        .collect::<Result<_>>()?;
    let prompt_id = env.task.prompt_id(ctx);
    let rollout = policy.group_rollout(reference, ctx, &prompt_id, &samples, rewards.clone(), cfg.grpo.epsilon)?;
    let loss = grpo_loss(&rollout, &cfg.grpo)?;
    let token_grads = grpo_token_grads(&rollout, &cfg.grpo)?;
    let grad = policy.logit_grad(ctx, &samples, &token_grads);
    let mut kl_sum = 0.0;
    for i in 0..rollout.len() {
        kl_sum += rollout.kl(i)?;
    }
    let records = cfg.record_samples.then(|| {
        samples
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(i, (s, sc))| SampleRecord {
                prompt_id: prompt_id.clone(),
                text: s.completion.text.clone(),
                token_count: s.completion.token_count,
                values: sc.values,
                rubric: sc.rubric.clone(),
                combined: rewards[i],
                advantage: rollout.advantages[i],
            })
            .collect()
    });
    Ok(GroupOutcome {
        ctx,
        grad,
        loss,
        kl_sum,
        length_sum: samples.iter().map(|s| s.completion.token_count).sum(),
        rewards,
        scores,
        samples: records,
    })
}

fn component_means(outcomes: &[GroupOutcome]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut add = |k: &str, v: f64| {
        let e = sums.entry(k.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    };
    for o in outcomes {
        for s in &o.scores {
            for c in [Component::Fmt, Component::Acc, Component::Rubric, Component::Asm] {
                if let Some(v) = s.values.get(c) {
                    add(c.name(), v);
                }
            }
            if let Some(r) = &s.rubric {
                add("r_a", r.r_a);
                add("r_p", r.r_p);
                add("r_u", r.r_u);
                add("r_f", r.r_f);
            }
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Runs `cfg.steps` GRPO updates on `policy`, calling `on_step` after each.
///
/// Each step samples `batch_size` groups in parallel; the parameter update
/// is applied once all groups are scored, so results do not depend on the
/// thread count.
pub fn train_toy_with<F>(policy: &mut ToyPolicy, cfg: &TrainConfig, mut on_step: F) -> Result<()>
where
    F: FnMut(&StepRecord) -> Result<()>,
{
    cfg.validate()?;
    if policy.n_contexts() != cfg.task.n_contexts() || policy.vocab() != cfg.task.vocabulary().as_slice() {
        return contract("policy shape does not match the task");
    }
    let env = TaskEnv::new(cfg.task.clone())?;
    let reference = policy.clone();
    let batch = cfg.grpo.batch_size;
    for step in 0..cfg.steps {
        let outcomes: Vec<GroupOutcome> = (0..batch)
            .into_par_iter()
            .map(|b| run_group(policy, &reference, &env, cfg, step, b))
            .collect::<Result<_>>()
            .map_err(|e| Error::Divergence {
                step,
                detail: e.to_string(),
            })?;
        let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        let scale = cfg.grpo.learning_rate / batch as f64;
        for o in &outcomes {
            policy.apply_grad(o.ctx, &o.grad, scale);
        }
        if policy.logits.iter().chain(policy.shared.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "policy logits became non-finite".into(),
            });
        }
        let n = (batch * cfg.grpo.group_size) as f64;
        let record = StepRecord {
            step,
            mean_reward: outcomes.iter().flat_map(|o| &o.rewards).sum::<f64>() / n,
            components: component_means(&outcomes),
            mean_length: outcomes.iter().map(|o| o.length_sum).sum::<usize>() as f64 / n,
            kl: outcomes.iter().map(|o| o.kl_sum).sum::<f64>() / n,
            exact_kl: (0..policy.n_contexts())
                .map(|c| policy.exact_kl(&reference, c))
                .sum::<f64>()
                / policy.n_contexts() as f64,
            loss,
            samples: cfg
                .record_samples
                .then(|| outcomes.into_iter().flat_map(|o| o.samples.unwrap_or_default()).collect()),
        };
        on_step(&record)?;
    }
    Ok(())
}

/// Trains and returns the full history.
pub fn train_toy(policy: &mut ToyPolicy, cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    let mut history = Vec::with_capacity(cfg.steps);
    train_toy_with(policy, cfg, |r| {
        history.push(r.clone());
        Ok(())
    })?;
    Ok(history)
}

/// One JSON object per line.
pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Fraction of greedy (argmax) completions scoring full accuracy, over all
/// contexts of a parity task.
pub fn greedy_accuracy(policy: &ToyPolicy, env: &TaskEnv) -> Result<f64> {
    let mut correct = 0usize;
    for ctx in 0..policy.n_contexts() {
        let mut tokens = Vec::new();
        for pos in 0..policy.max_length() {
            let p = policy.probs(ctx, pos);
            let best = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            tokens.push(best);
            if best == policy.eos() {
                break;
            }
        }
        let sample = ToySample {
            completion: policy.render(&tokens),
            tokens,
        };
        if env.score(policy, ctx, &sample)?.values.acc == Some(1.0) {
            correct += 1;
        }
    }
    Ok(correct as f64 / policy.n_contexts() as f64)
}
