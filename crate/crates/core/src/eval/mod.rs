//! Scoring completions against gold labels and aggregating per-domain and
//! per-reasoning-type accuracy reports.
//!
//! MCQ answers are graded by option-letter exact match; units and
//! principles by the same matchers the rubric reward uses. Open-ended
//! answers go through a single equivalence judge call (the offline stub in
//! offline mode). In judge mode, open-ended units and principles are judged
//! the same way.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Domain, Problem, ReasoningType, UnitAliases};
use crate::error::{contract, Error, LineError, Result};
use crate::judge::JudgeClient;
use crate::rule_rewards::{
    mcq_accuracy_reward, principle_overlap_reward, unit_consistency_reward, AnswerFormat, Stopwords,
};
use crate::structured_output::{parse_text, Completion, ParsedResponse, Tag};

mod report;

pub use report::{aggregate, mean_reports, round_half_even, Cell, MeanCell, MeanReport, Named, Report, Score, Stat};

/// One line of a completions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub problem_id: String,
    pub text: String,
    /// Generated token count, when the producer recorded it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    /// Attention capture manifests for this completion, relative to the
    /// completions file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captures: Vec<String>,
}

impl CompletionRow {
    pub fn completion(&self) -> Completion {
        match self.token_count {
            Some(n) => Completion::new(self.text.clone(), n),
            None => Completion::from_text(self.text.clone()),
        }
    }
}

pub fn load_completions(path: &Path) -> Result<Vec<CompletionRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CompletionRow>(&line) {
            Ok(row) => {
                if let Some(first) = seen.insert(row.problem_id.clone(), i + 1) {
                    errors.push(LineError {
                        line: i + 1,
                        message: format!("duplicate problem_id {:?} (first on line {first})", row.problem_id),
                    });
                }
                rows.push(row);
            }
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(Error::Validation {
            path: path.to_path_buf(),
            errors,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Rule matchers and the stub judge; no network.
    #[default]
    Offline,
    /// Open-ended fields go to the configured judge.
    Judge,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(EvalMode::Offline),
            "judge" => Ok(EvalMode::Judge),
            _ => contract(format!("eval mode must be offline or judge, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub problem_id: String,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_type: Option<ReasoningType>,
    pub format: AnswerFormat,
    pub parsed: ParsedResponse,
    pub answer_correct: u8,
    /// Absent when the problem has no gold unit.
    pub unit_correct: Option<u8>,
    /// Absent when the problem has no gold principle.
    pub principle_correct: Option<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub stopwords: Stopwords,
    /// Expands unit spellings before matching. Off unless set.
    pub aliases: Option<UnitAliases>,
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

fn judged(client: &JudgeClient, predicted: Option<&str>, gold: &str) -> Result<u8> {
    match predicted.map(str::trim).filter(|p| !p.is_empty()) {
        Some(p) => Ok(bit(client.judge_mcq_equivalence(p, gold)?)),
        None => Ok(0),
    }
}

fn score_one(
    problem: &Problem,
    text: &str,
    mode: EvalMode,
    client: &JudgeClient,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    let parsed = parse_text(text);
    let gold = &problem.gold;
    let rule_unit = |p: &str| match &opts.aliases {
        Some(a) => a.unit_reward(p, &gold.unit),
        None => unit_consistency_reward(p, &gold.unit),
    };
    let has_unit = !gold.unit.trim().is_empty();
    let has_principle = !gold.principle.trim().is_empty();
    let (answer, unit, principle) = match (problem.format, mode) {
        (AnswerFormat::Mcq, _) | (AnswerFormat::Oe, EvalMode::Offline) => {
            let answer = match problem.format {
                AnswerFormat::Mcq => bit(mcq_accuracy_reward(&parsed, gold)? == 1.0),
                AnswerFormat::Oe => judged(client, parsed.field(Tag::Answer), &gold.answer)?,
            };
            let unit = has_unit.then(|| bit(rule_unit(parsed.content(Tag::Unit)) == 1.0));
            let principle = has_principle.then(|| {
                bit(principle_overlap_reward(parsed.content(Tag::Principle), &gold.principle, &opts.stopwords) == 1.0)
            });
            (answer, unit, principle)
        }
        (AnswerFormat::Oe, EvalMode::Judge) => {
            let answer = judged(client, parsed.field(Tag::Answer), &gold.answer)?;
            let unit = if has_unit {
                Some(judged(client, parsed.field(Tag::Unit), &gold.unit)?)
            } else {
                None
            };
            let principle = if has_principle {
                Some(judged(client, parsed.field(Tag::Principle), &gold.principle)?)
            } else {
                None
            };
            (answer, unit, principle)
        }
    };
    Ok(EvalRecord {
        problem_id: problem.id.clone(),
        domain: problem.domain,
        reasoning_type: problem.reasoning_type,
        format: problem.format,
        parsed,
        answer_correct: answer,
        unit_correct: unit,
        principle_correct: principle,
    })
}

/// Scores one completion per problem, in problem order.
///
/// Offline mode ignores `client`'s backend and uses the stub judge.
pub fn evaluate(
    problems: &[Problem],
    completions: &[CompletionRow],
    mode: EvalMode,
    client: &JudgeClient,
    opts: &EvalOptions,
) -> Result<Vec<EvalRecord>> {
    if problems.is_empty() {
        return contract("no problems to evaluate");
    }
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for c in completions {
        if by_id.insert(&c.problem_id, &c.text).is_some() {
            return contract(format!("duplicate completion for problem {:?}", c.problem_id));
        }
    }
    let problem_ids: BTreeSet<&str> = problems.iter().map(|p| p.id.as_str()).collect();
    let missing: Vec<&str> = problems.iter().map(|p| p.id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    let unknown: Vec<&str> = by_id.keys().copied().filter(|id| !problem_ids.contains(id)).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("problem and completion ids differ");
        if !missing.is_empty() {
            msg.push_str(&format!("; no completion for: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            msg.push_str(&format!("; completions for unknown problems: {}", unknown.join(", ")));
        }
        return contract(msg);
    }
    let stub;
    let client = match mode {
        EvalMode::Offline => {
            stub = JudgeClient::offline(client.config().clone())?;
            &stub
        }
        _ => client,
    };
    client.install(|| {
        problems
            .par_iter()
            .map(|p| score_one(p, by_id[p.id.as_str()], mode, client, opts))
            .collect()
    })
}
