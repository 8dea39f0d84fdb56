use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use phyreward::attention::{attn_reward_for_rollout, read_capture, render_heatmap, render_overlay, GroundingOptions};
use phyreward::dataset::labeling::{run_pipeline, LabelField, OntologySource, PipelineOptions};
use phyreward::dataset::{load_problems, Problem, UnitAliases, UnitOntology};
use phyreward::eval::{aggregate, evaluate, load_completions, mean_reports, EvalMode, EvalOptions, Report};
use phyreward::grpo::toy::{greedy_accuracy, train_toy_with, StepRecord, TaskEnv, ToyTask, TrainConfig};
use phyreward::plot::{bar_chart, line_chart, Series};
use phyreward::scoring::{score_completion, GroundingInput, RewardBreakdown, RewardSelector, ScoreOptions};
use rayon::prelude::*;
use serde::Serialize;

use crate::judge_args::JudgeKind;
use crate::{AttnArgs, CliError, CliResult, EvalArgs, GroundingArgs, LabelArgs, ModeArg, ReportArgs, ScoreArgs, TrainToyArgs};

const CHART_W: u32 = 720;
const CHART_H: u32 = 400;

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Prefixes an error with the file it came from, unless it already names it.
fn at<T, E: std::fmt::Display>(path: &Path, r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| {
        let shown = path.display().to_string();
        let msg = e.to_string();
        CliError::Usage(if msg.contains(&shown) { msg } else { format!("{shown}: {msg}") })
    })
}

fn load_rgb(path: &Path) -> CliResult<RgbImage> {
    at(path, image::open(path).map(|i| i.to_rgb8()))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(out: impl Write, rows: &[T]) -> CliResult<()> {
    let mut out = BufWriter::new(out);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

impl GroundingArgs {
    fn options(&self, keep_maps: bool) -> GroundingOptions {
        GroundingOptions {
            white_threshold: self.white_threshold,
            fill_whitespace: self.fill_whitespace,
            keep_maps,
        }
    }
}

pub fn score(a: &ScoreArgs) -> CliResult<()> {
    let selector: RewardSelector = a.reward.parse()?;
    let problems = at(&a.problems, load_problems(&a.problems))?;
    let rows = at(&a.completions, load_completions(&a.completions))?;
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let unknown: Vec<&str> = rows
        .iter()
        .map(|r| r.problem_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!("completions for unknown problems: {}", unknown.join(", "))));
    }
    let image_root = a.image_root.clone().unwrap_or_else(|| parent_dir(&a.problems));
    let capture_root = parent_dir(&a.completions);
    let client = a.judge.client()?;
    let opts = ScoreOptions {
        grounding: a.grounding.options(false),
        ..ScoreOptions::default()
    };
    let results: Vec<RewardBreakdown> = client.install(|| {
        rows.par_iter()
            .map(|row| {
                let problem = by_id[row.problem_id.as_str()];
                let context = |e: String| CliError::Usage(format!("completion for {}: {e}", row.problem_id));
                let completion = row.completion();
                let breakdown = if row.captures.is_empty() {
                    score_completion(problem, &completion, None, &selector, &client, &opts)
                } else {
                    let captures = row
                        .captures
                        .iter()
                        .map(|c| {
                            let path = capture_root.join(c);
                            at(&path, read_capture(&path))
                        })
                        .collect::<CliResult<Vec<_>>>()
                        .map_err(|e| context(e.to_string()))?;
                    let image = load_rgb(&image_root.join(&problem.image_path)).map_err(|e| context(e.to_string()))?;
                    let input = GroundingInput {
                        captures: &captures,
                        image: &image,
                    };
                    score_completion(problem, &completion, Some(input), &selector, &client, &opts)
                };
                breakdown.map_err(|e| context(e.to_string()))
            })
            .collect::<CliResult<_>>()
    })?;
    log::info!("scored {} completions under {}", results.len(), selector.name());
    match &a.out {
        Some(path) => write_jsonl(File::create(path)?, &results),
        None => write_jsonl(std::io::stdout().lock(), &results),
    }
}

#[derive(Serialize)]
struct AttnSummary<'a> {
    asm: f64,
    entropy: f64,
    per_token: &'a [f64],
    captures: Vec<String>,
    image: String,
}

pub fn attn(a: &AttnArgs) -> CliResult<()> {
    let captures = a
        .captures
        .iter()
        .map(|p| at(p, read_capture(p)))
        .collect::<CliResult<Vec<_>>>()?;
    let image = load_rgb(&a.image)?;
    let scores = attn_reward_for_rollout(&captures, &image, a.grounding.options(true))?;
    std::fs::create_dir_all(&a.out)?;
    let summary = AttnSummary {
        asm: scores.asm,
        entropy: scores.entropy,
        per_token: &scores.per_token,
        captures: a.captures.iter().map(|p| p.display().to_string()).collect(),
        image: a.image.display().to_string(),
    };
    write_json_pretty(&a.out.join("scores.json"), &summary)?;
    for (i, map) in scores.token_maps.iter().enumerate() {
        render_overlay(map, &image, a.opacity).save(a.out.join(format!("token_{i:03}.png")))?;
    }
    render_overlay(&scores.cumulative_map, &image, a.opacity).save(a.out.join("cumulative_overlay.png"))?;
    render_heatmap(&scores.cumulative_map).save(a.out.join("cumulative_heatmap.png"))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config: String,
    seed: u64,
    steps: usize,
    reward: String,
    final_mean_reward: f64,
    last10_mean_reward: f64,
    final_mean_length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    greedy_accuracy: Option<f64>,
}

fn reward_chart(history: &[StepRecord]) -> CliResult<RgbImage> {
    let mut series = vec![Series {
        name: "reward".into(),
        values: history.iter().map(|r| r.mean_reward).collect(),
    }];
    let keys: Vec<&String> = history[0].components.keys().collect();
    for k in keys {
        series.push(Series {
            name: k.clone(),
            values: history
                .iter()
                .map(|r| r.components.get(k).copied().unwrap_or(f64::NAN))
                .collect(),
        });
    }
    Ok(line_chart("mean reward per step", "step", &series, CHART_W, CHART_H)?)
}

fn length_chart(history: &[StepRecord]) -> CliResult<RgbImage> {
    let series = [Series {
        name: "tokens".into(),
        values: history.iter().map(|r| r.mean_length).collect(),
    }];
    Ok(line_chart("mean completion tokens per step", "step", &series, CHART_W, CHART_H)?)
}

pub fn train_toy(a: &TrainToyArgs) -> CliResult<()> {
    let mut cfg = at(&a.config, TrainConfig::load(&a.config))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let mut policy = cfg.build_policy()?;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut out = BufWriter::new(File::create(a.out.join("history.jsonl"))?);
    let run = train_toy_with(&mut policy, &cfg, |r| {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        log::debug!("step {} reward {:.4}", r.step, r.mean_reward);
        history.push(r.clone());
        Ok(())
    });
    out.flush()?;
    run?;
    if history.is_empty() {
        return Err(CliError::Usage("config runs zero steps".into()));
    }
    reward_chart(&history)?.save(a.out.join("rewards.png"))?;
    length_chart(&history)?.save(a.out.join("tokens.png"))?;
    let tail = &history[history.len().saturating_sub(10)..];
    let last = history.last().expect("non-empty");
    let greedy = match cfg.task {
        ToyTask::ParityMcq { .. } => Some(greedy_accuracy(&policy, &TaskEnv::new(cfg.task.clone())?)?),
        _ => None,
    };
    let summary = TrainSummary {
        config: a.config.display().to_string(),
        seed: cfg.seed,
        steps: cfg.steps,
        reward: cfg.reward.name(),
        final_mean_reward: last.mean_reward,
        last10_mean_reward: tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len() as f64,
        final_mean_length: last.mean_length,
        greedy_accuracy: greedy,
    };
    write_json_pretty(&a.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn accuracy_bars(report: &Report) -> Vec<(String, f64)> {
    std::iter::once(("Overall".to_string(), report.overall.answer.accuracy))
        .chain(report.domains.iter().map(|n| (n.name.clone(), n.value.answer.accuracy)))
        .collect()
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let problems = at(&a.problems, load_problems(&a.problems))?;
    let completions = at(&a.completions, load_completions(&a.completions))?;
    let mode = match a.mode {
        ModeArg::Offline => EvalMode::Offline,
        ModeArg::Judge => EvalMode::Judge,
    };
    if mode == EvalMode::Offline && a.judge.judge == JudgeKind::Live {
        log::warn!("offline evaluation does not contact the live judge");
    }
    let client = a.judge.client()?;
    let aliases = match (&a.aliases, a.common_aliases) {
        (Some(path), _) => Some(at(path, UnitAliases::load(path))?),
        (None, true) => Some(UnitAliases::common()),
        (None, false) => None,
    };
    let opts = EvalOptions {
        aliases,
        ..EvalOptions::default()
    };
    let records = evaluate(&problems, &completions, mode, &client, &opts)?;
    let report = aggregate(&records)?;
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(File::create(a.out.join("records.jsonl"))?, &records)?;
    write_json_pretty(&a.out.join("report.json"), &report)?;
    let table = report.to_table();
    std::fs::write(a.out.join("report.txt"), &table)?;
    if a.chart {
        bar_chart("answer accuracy", &accuracy_bars(&report), 1.0, CHART_W, CHART_H)?
            .save(a.out.join("domains.png"))?;
    }
    print!("{table}");
    Ok(())
}

pub fn label(a: &LabelArgs) -> CliResult<()> {
    let field: LabelField = a.field.parse()?;
    let ontology = match a.ontology.as_str() {
        "cluster" => OntologySource::Cluster {
            batch_size: a.batch_size,
        },
        "standard-v1" => OntologySource::Fixed(UnitOntology::standard_v1()),
        path => OntologySource::Fixed(at(Path::new(path), UnitOntology::load(Path::new(path)))?),
    };
    let problems = at(&a.problems, load_problems(&a.problems))?;
    let client = a.judge.client()?;
    let manifest = run_pipeline(&problems, &client, &a.out, &PipelineOptions { field, ontology })?;
    if manifest.flagged_batches > 0 {
        log::warn!("{} clustering batch(es) flagged for review", manifest.flagged_batches);
    }
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let bytes = at(p, std::fs::read(p))?;
            at(p, serde_json::from_slice::<Report>(&bytes))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mean = mean_reports(&reports)?;
    if let Some(path) = &a.out {
        write_json_pretty(path, &mean)?;
    }
    if let Some(path) = &a.chart {
        let bars: Vec<(String, f64)> = std::iter::once(("Overall".to_string(), mean.overall.answer.mean))
            .chain(mean.domains.iter().map(|n| (n.name.clone(), n.value.answer.mean)))
            .collect();
        bar_chart("mean answer accuracy", &bars, 1.0, CHART_W, CHART_H)?.save(path)?;
    }
    print!("{}", mean.to_table());
    Ok(())
}
