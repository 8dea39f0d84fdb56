//! LLM-as-judge client and jury aggregation.
//!
//! Open-ended responses are scored by a jury of K judge calls. Correctness
//! and reasoning (0/1/2 each) are averaged and halved into [0, 1]; principle
//! and unit (0/1 each) are decided by majority vote.

mod backend;
pub mod prompts;
mod stub;

use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use backend::{
    CachedBackend, ChatBackend, ChatMessage, ChatRequest, FnBackend, HttpBackend, JudgeTask,
};
pub use prompts::{render_prompt, render_template, slots, PromptId, PROMPT_SET_VERSION};
pub use stub::{graded_match, overlap_ratio, StubJudge};

use crate::error::{contract, Error, Result};
use crate::rule_rewards::{AnswerFormat, GoldLabels};
use crate::structured_output::{ParsedResponse, Tag};

/// Judge endpoint and jury settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// Base URL of an OpenAI-compatible server, e.g. `http://localhost:8000`.
    pub endpoint_url: String,
    pub model_name: String,
    /// Jury size K. Must be odd.
    pub n_judges: usize,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Sampling temperature for jury calls.
    pub temperature: f64,
    /// Sampling temperature for single equivalence calls.
    pub equivalence_temperature: f64,
    /// Upper bound on concurrent judge requests.
    pub max_in_flight: usize,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000".into(),
            model_name: "gpt-oss-120b".into(),
            n_judges: 3,
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.7,
            equivalence_temperature: 0.0,
            max_in_flight: 8,
            api_key_env: "JUDGE_API_KEY".into(),
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_judges == 0 || self.n_judges % 2 == 0 {
            return contract(format!("n_judges must be odd, got {}", self.n_judges));
        }
        if !(self.timeout_secs > 0.0) {
            return contract("timeout must be positive");
        }
        if self.max_in_flight == 0 {
            return contract("max_in_flight must be positive");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// HTTP backend for this configuration, reading the key from the environment.
    pub fn http_backend(&self) -> Result<HttpBackend> {
        self.validate()?;
        let key = std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty());
        HttpBackend::new(&self.endpoint_url, key, self.timeout(), self.max_retries)
    }
}

/// One judge's scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// 0, 1 or 2.
    pub correctness: u8,
    /// 0 or 1.
    pub principle: u8,
    /// 0 or 1.
    pub unit: u8,
    /// 0, 1 or 2.
    pub reasoning: u8,
    pub raw_response: String,
}

impl JudgeVerdict {
    pub fn new(correctness: u8, principle: u8, unit: u8, reasoning: u8) -> Self {
        Self {
            correctness,
            principle,
            unit,
            reasoning,
            raw_response: String::new(),
        }
    }

    /// All-zero verdict used when a judge never produced a parseable reply.
    pub fn fail_closed(raw_response: String) -> Self {
        Self {
            raw_response,
            ..Self::new(0, 0, 0, 0)
        }
    }

    fn in_range(&self) -> bool {
        self.correctness <= 2 && self.principle <= 1 && self.unit <= 1 && self.reasoning <= 2
    }
}

/// Jury outcome over K verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedVerdict {
    pub r_a: f64,
    pub r_p: f64,
    pub r_u: f64,
    pub r_reason: f64,
    pub n_judges: usize,
}

fn verdict_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s*#-]*(CORRECTNESS|PRINCIPLE|UNIT|REASONING)[\s*]*[:=][\s*]*(\d+)")
            .expect("static regex")
    })
}

/// Parses the four-line `NAME: score` layout. Returns `None` when any
/// dimension is missing or out of range.
pub fn parse_verdict(raw: &str) -> Option<JudgeVerdict> {
    let mut dims: [Option<u8>; 4] = [None; 4];
    for cap in verdict_regex().captures_iter(raw) {
        let idx = match cap[1].to_ascii_uppercase().as_str() {
            "CORRECTNESS" => 0,
            "PRINCIPLE" => 1,
            "UNIT" => 2,
            _ => 3,
        };
        if dims[idx].is_none() {
            dims[idx] = cap[2].parse().ok();
        }
    }
    let verdict = JudgeVerdict {
        correctness: dims[0]?,
        principle: dims[1]?,
        unit: dims[2]?,
        reasoning: dims[3]?,
        raw_response: raw.to_string(),
    };
    verdict.in_range().then_some(verdict)
}

/// Averages correctness and reasoning (halved into [0, 1]) and majority-votes
/// principle and unit.
pub fn aggregate_verdicts(verdicts: &[JudgeVerdict]) -> Result<AggregatedVerdict> {
    let k = verdicts.len();
    if k == 0 {
        return contract("cannot aggregate an empty jury");
    }
    if let Some(v) = verdicts.iter().find(|v| !v.in_range()) {
        return contract(format!("verdict out of range: {v:?}"));
    }
    let sum = |f: fn(&JudgeVerdict) -> u8| verdicts.iter().map(|v| f(v) as u32).sum::<u32>();
    let majority = |ones: u32| if 2 * ones as usize > k { 1.0 } else { 0.0 };
    Ok(AggregatedVerdict {
        r_a: sum(|v| v.correctness) as f64 / (2 * k) as f64,
        r_reason: sum(|v| v.reasoning) as f64 / (2 * k) as f64,
        r_p: majority(sum(|v| v.principle)),
        r_u: majority(sum(|v| v.unit)),
        n_judges: k,
    })
}

/// Judge client bound to one backend.
pub struct JudgeClient {
    backend: Arc<dyn ChatBackend>,
    cfg: JudgeConfig,
    pool: Arc<rayon::ThreadPool>,
}

impl JudgeClient {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: JudgeConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_in_flight)
            .thread_name(|i| format!("judge-{i}"))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            backend,
            cfg,
            pool: Arc::new(pool),
        })
    }

    /// Client over the offline stub judge.
    pub fn offline(cfg: JudgeConfig) -> Result<Self> {
        Self::new(Arc::new(StubJudge::new()), cfg)
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn is_offline(&self) -> bool {
        self.backend.is_offline()
    }

    /// Runs `f` inside the client's bounded pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Issues one request, re-asking up to `max_retries` times while `parse`
    /// rejects the reply. Returns the last raw reply when all attempts fail.
    pub fn ask_parsed<T>(
        &self,
        task: JudgeTask,
        messages: Vec<ChatMessage>,
        temperature: f64,
        call_index: u32,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<std::result::Result<T, String>> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            let request = ChatRequest {
                task,
                model: self.cfg.model_name.clone(),
                messages: messages.clone(),
                temperature,
                call_index,
                attempt,
            };
            let raw = self.backend.complete(&request)?;
            if let Some(parsed) = parse(&raw) {
                return Ok(Ok(parsed));
            }
            log::debug!("unparseable {task:?} reply (attempt {}): {raw:?}", attempt + 1);
            last = raw;
        }
        Ok(Err(last))
    }

    /// Runs the K-judge rubric jury on one open-ended response.
    pub fn judge_oe_rubric(
        &self,
        question: &str,
        image_ref: Option<&str>,
        parsed: &ParsedResponse,
        gold: &GoldLabels,
    ) -> Result<(AggregatedVerdict, Vec<JudgeVerdict>)> {
        if gold.format != AnswerFormat::Oe {
            return contract("judge_oe_rubric requires open-ended gold labels");
        }
        let messages = vec![
            ChatMessage::system(PromptId::OeRubricJudge.template()),
            ChatMessage::user(rubric_payload(question, image_ref, parsed, gold)),
        ];
        let k = self.cfg.n_judges;
        let outcomes: Vec<Result<JudgeVerdict>> = self.pool.install(|| {
            (0..k)
                .into_par_iter()
                .map(|slot| {
                    let out = self.ask_parsed(
                        JudgeTask::RubricJury,
                        messages.clone(),
                        self.cfg.temperature,
                        slot as u32,
                        parse_verdict,
                    )?;
                    Ok(out.unwrap_or_else(|raw| {
                        log::warn!(
                            "judge {slot} gave no parseable verdict after {} attempt(s); scoring as zeros",
                            self.cfg.max_retries + 1
                        );
                        JudgeVerdict::fail_closed(raw)
                    }))
                })
                .collect()
        });
        let verdicts = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((aggregate_verdicts(&verdicts)?, verdicts))
    }

    /// Jury accuracy only: mean correctness / 2.
    pub fn judge_oe_accuracy(
        &self,
        question: &str,
        parsed: &ParsedResponse,
        gold: &GoldLabels,
    ) -> Result<f64> {
        Ok(self.judge_oe_rubric(question, None, parsed, gold)?.0.r_a)
    }

    /// Single equivalence call. Offline clients short-circuit identical strings.
    pub fn judge_mcq_equivalence(&self, llm_answer: &str, gold_answer: &str) -> Result<bool> {
        if self.is_offline() && llm_answer.trim() == gold_answer.trim() {
            return Ok(true);
        }
        let messages = vec![
            ChatMessage::system(PromptId::McqaJudge.template()),
            ChatMessage::user(format!("LLM: {llm_answer} | Ground Truth: {gold_answer}")),
        ];
        let out = self.ask_parsed(
            JudgeTask::Equivalence,
            messages,
            self.cfg.equivalence_temperature,
            0,
            parse_equivalence,
        )?;
        Ok(out.unwrap_or_else(|raw| {
            log::warn!("equivalence judge reply {raw:?} is neither True nor False; scoring false");
            false
        }))
    }
}

/// `True` / `False` reply, case-insensitive after trimming.
pub fn parse_equivalence(raw: &str) -> Option<bool> {
    let t = raw.trim().trim_end_matches('.');
    if t.eq_ignore_ascii_case("true") {
        Some(true)
    } else if t.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn rubric_payload(
    question: &str,
    image_ref: Option<&str>,
    parsed: &ParsedResponse,
    gold: &GoldLabels,
) -> String {
    json!({
        "question": question,
        "image": image_ref,
        "reference": {
            "answer": gold.answer,
            "unit": gold.unit,
            "principle": gold.principle,
        },
        "response": {
            "reasoning": parsed.field(Tag::Think),
            "answer": parsed.field(Tag::Answer),
            "unit": parsed.field(Tag::Unit),
            "principle": parsed.field(Tag::Principle),
        },
    })
    .to_string()
}
