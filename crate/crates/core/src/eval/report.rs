use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::dataset::{Domain, ReasoningType};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Score {
    fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        }
    }

    /// Accuracy rounded half-to-even at three decimals, computed exactly.
    pub fn text(&self) -> String {
        let scaled = self.correct as u128 * 1000;
        let total = self.total as u128;
        let (mut q, r) = (scaled / total, scaled % total);
        if 2 * r > total || (2 * r == total && q % 2 == 1) {
            q += 1;
        }
        format!("{}.{:03}", q / 1000, q % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub answer: Score,
    /// Over problems with a gold unit; absent when there are none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principle: Option<Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Named<T> {
    pub name: String,
    #[serde(flatten)]
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: Cell,
    /// Domains with at least one problem, in column order.
    pub domains: Vec<Named<Cell>>,
    pub reasoning_types: Vec<Named<Cell>>,
}

fn cell<'a>(records: impl Iterator<Item = &'a EvalRecord> + Clone) -> Option<Cell> {
    let count = records.clone().count();
    if count == 0 {
        return None;
    }
    let answer = records.clone().filter(|r| r.answer_correct == 1).count();
    let sub = |f: fn(&EvalRecord) -> Option<u8>| {
        let labeled: Vec<u8> = records.clone().filter_map(f).collect();
        (!labeled.is_empty()).then(|| {
            Score::new(labeled.iter().filter(|&&v| v == 1).count(), labeled.len())
        })
    };
    Some(Cell {
        count,
        answer: Score::new(answer, count),
        unit: sub(|r| r.unit_correct),
        principle: sub(|r| r.principle_correct),
    })
}

/// Accuracy per cell; cells with no problems are left out.
pub fn aggregate(records: &[EvalRecord]) -> Result<Report> {
    let Some(overall) = cell(records.iter()) else {
        return contract("cannot aggregate an empty record set");
    };
    let domains = Domain::ALL
        .iter()
        .filter_map(|&d| {
            cell(records.iter().filter(move |r| r.domain == d)).map(|value| Named {
                name: d.short().to_string(),
                value,
            })
        })
        .collect();
    let reasoning_types = ReasoningType::ALL
        .iter()
        .filter_map(|&t| {
            cell(records.iter().filter(move |r| r.reasoning_type == Some(t))).map(|value| Named {
                name: t.name().to_string(),
                value,
            })
        })
        .collect();
    Ok(Report {
        overall,
        domains,
        reasoning_types,
    })
}

/// `x` rounded half-to-even at `digits` decimals.
pub fn round_half_even(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (x * scale).round_ties_even() / scale
}

fn domain_headers() -> Vec<String> {
    std::iter::once("Overall".to_string())
        .chain(Domain::ALL.iter().map(|d| d.short().to_string()))
        .collect()
}

fn render_table(headers: &[String], rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r.1[i].len()).chain([h.len(), 5]).max().unwrap_or(5))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (label, values) in rows {
        let _ = write!(out, "{label:label_w$}");
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

const ABSENT: &str = "-";

impl Report {
    /// Overall then domains in column order; `None` where a domain is absent.
    pub fn domain_cells(&self) -> Vec<Option<&Cell>> {
        std::iter::once(Some(&self.overall))
            .chain(Domain::ALL.iter().map(|d| {
                self.domains.iter().find(|n| n.name == d.short()).map(|n| &n.value)
            }))
            .collect()
    }

    /// Aligned text tables: per-domain accuracies, then per reasoning type
    /// when any record carries one.
    pub fn to_table(&self) -> String {
        let cells = self.domain_cells();
        let line = |label: &str, f: &dyn Fn(&Cell) -> Option<String>| {
            (
                label.to_string(),
                cells.iter().map(|c| c.and_then(f).unwrap_or_else(|| ABSENT.into())).collect(),
            )
        };
        let rows = vec![
            line("answer", &|c| Some(c.answer.text())),
            line("unit", &|c| c.unit.map(|s| s.text())),
            line("principle", &|c| c.principle.map(|s| s.text())),
            line("n", &|c| Some(c.count.to_string())),
        ];
        let mut out = render_table(&domain_headers(), &rows);
        if !self.reasoning_types.is_empty() {
            out.push('\n');
            let headers = vec!["answer".to_string(), "unit".into(), "principle".into(), "n".into()];
            let rows: Vec<(String, Vec<String>)> = self
                .reasoning_types
                .iter()
                .map(|n| {
                    let c = &n.value;
                    (
                        n.name.clone(),
                        vec![
                            c.answer.text(),
                            c.unit.map_or(ABSENT.into(), |s| s.text()),
                            c.principle.map_or(ABSENT.into(), |s| s.text()),
                            c.count.to_string(),
                        ],
                    )
                })
                .collect();
            out.push_str(&render_table(&headers, &rows));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation across reports.
    pub std: f64,
    pub reports: usize,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Stat {
        mean,
        std: var.sqrt(),
        reports: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCell {
    pub answer: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principle: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub reports: usize,
    pub overall: MeanCell,
    pub domains: Vec<Named<MeanCell>>,
}

fn mean_cell(cells: &[&Cell]) -> Option<MeanCell> {
    let pick = |f: fn(&Cell) -> Option<Score>| {
        stat(&cells.iter().filter_map(|c| f(c)).map(|s| s.accuracy).collect::<Vec<_>>())
    };
    Some(MeanCell {
        answer: pick(|c| Some(c.answer))?,
        unit: pick(|c| c.unit),
        principle: pick(|c| c.principle),
    })
}

/// Cell-wise mean and spread of several reports. A cell absent from some
/// reports is averaged over the reports that have it.
pub fn mean_reports(reports: &[Report]) -> Result<MeanReport> {
    if reports.is_empty() {
        return contract("no reports to average");
    }
    let overall: Vec<&Cell> = reports.iter().map(|r| &r.overall).collect();
    let domains = Domain::ALL
        .iter()
        .filter_map(|d| {
            let cells: Vec<&Cell> = reports
                .iter()
                .filter_map(|r| r.domains.iter().find(|n| n.name == d.short()).map(|n| &n.value))
                .collect();
            mean_cell(&cells).map(|value| Named {
                name: d.short().to_string(),
                value,
            })
        })
        .collect();
    Ok(MeanReport {
        reports: reports.len(),
        overall: mean_cell(&overall).expect("at least one report"),
        domains,
    })
}

impl MeanReport {
    pub fn to_table(&self) -> String {
        let cells: Vec<Option<&MeanCell>> = std::iter::once(Some(&self.overall))
            .chain(Domain::ALL.iter().map(|d| {
                self.domains.iter().find(|n| n.name == d.short()).map(|n| &n.value)
            }))
            .collect();
        let fmt = |v: f64| format!("{:.3}", round_half_even(v, 3));
        let line = |label: &str, f: &dyn Fn(&MeanCell) -> Option<f64>| {
            (
                label.to_string(),
                cells.iter().map(|c| c.and_then(f).map_or(ABSENT.into(), fmt)).collect::<Vec<_>>(),
            )
        };
        let rows = vec![
            line("answer", &|c| Some(c.answer.mean)),
            line("answer sd", &|c| Some(c.answer.std)),
            line("unit", &|c| c.unit.map(|s| s.mean)),
            line("principle", &|c| c.principle.map(|s| s.mean)),
        ];
        let mut out = format!("mean over {} report(s)\n", self.reports);
        out.push_str(&render_table(&domain_headers(), &rows));
        out
    }
}
