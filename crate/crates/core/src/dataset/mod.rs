//! Physics problem records, the unit ontology and the judge-driven
//! labeling pipeline.
//!
//! Problems are stored as JSON lines:
//!
//! ```text
//! {"id": "mech-0001", "question": "...", "options": ["A. 2 m", "B. 4 m", "C. 6 m", "D. 8 m"],
//!  "image_path": "images/mech-0001.png", "format": "MCQ", "answer": "B",
//!  "unit": "m", "principle": "Kinematics equations", "domain": "Mechanics",
//!  "subfield": "Kinematics", "reasoning_type": "Spatial Relation"}
//! ```
//!
//! `options` is required for MCQ and must hold exactly four entries. `unit`,
//! `principle` and `reasoning_type` are optional.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, LineError, Result};
use crate::rule_rewards::{AnswerFormat, GoldLabels};

pub mod labeling;
mod ontology;

pub use ontology::{Cluster, UnitAliases, UnitOntology, STANDARD_V1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Mechanics,
    Electromagnetism,
    Thermodynamics,
    WaveAcoustics,
    Optics,
    ModernPhysics,
}

impl Domain {
    /// Report column order.
    pub const ALL: [Domain; 6] = [
        Domain::Mechanics,
        Domain::Electromagnetism,
        Domain::Thermodynamics,
        Domain::WaveAcoustics,
        Domain::Optics,
        Domain::ModernPhysics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Mechanics => "Mechanics",
            Domain::Electromagnetism => "Electromagnetism",
            Domain::Thermodynamics => "Thermodynamics",
            Domain::WaveAcoustics => "Wave/Acoustics",
            Domain::Optics => "Optics",
            Domain::ModernPhysics => "Modern Physics",
        }
    }

    /// Column header used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            Domain::Mechanics => "Mech.",
            Domain::Electromagnetism => "E&M",
            Domain::Thermodynamics => "Thermo.",
            Domain::WaveAcoustics => "Wave/Ac.",
            Domain::Optics => "Optics",
            Domain::ModernPhysics => "Mod. Phys.",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match squash(s).as_str() {
            "mechanics" | "mech" => Ok(Domain::Mechanics),
            "electromagnetism" | "em" => Ok(Domain::Electromagnetism),
            "thermodynamics" | "thermo" => Ok(Domain::Thermodynamics),
            "waveacoustics" | "wavesacoustics" | "waveac" => Ok(Domain::WaveAcoustics),
            "optics" => Ok(Domain::Optics),
            "modernphysics" | "modphys" => Ok(Domain::ModernPhysics),
            _ => contract(format!("unknown domain {s:?}")),
        }
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReasoningType {
    PhysicalModelGrounding,
    SpatialRelation,
    MultiFormula,
    ImplicitCondition,
    Numerical,
    Predictive,
}

impl ReasoningType {
    pub const ALL: [ReasoningType; 6] = [
        ReasoningType::PhysicalModelGrounding,
        ReasoningType::SpatialRelation,
        ReasoningType::MultiFormula,
        ReasoningType::ImplicitCondition,
        ReasoningType::Numerical,
        ReasoningType::Predictive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReasoningType::PhysicalModelGrounding => "Physical Model Grounding",
            ReasoningType::SpatialRelation => "Spatial Relation",
            ReasoningType::MultiFormula => "Multi-Formula",
            ReasoningType::ImplicitCondition => "Implicit Condition",
            ReasoningType::Numerical => "Numerical",
            ReasoningType::Predictive => "Predictive",
        }
    }
}

impl fmt::Display for ReasoningType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReasoningType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = squash(s);
        let key = key.strip_suffix("reasoning").unwrap_or(&key);
        match key {
            "physicalmodelgrounding" => Ok(ReasoningType::PhysicalModelGrounding),
            "spatialrelation" | "spatialrelationship" => Ok(ReasoningType::SpatialRelation),
            "multiformula" => Ok(ReasoningType::MultiFormula),
            "implicitcondition" => Ok(ReasoningType::ImplicitCondition),
            "numerical" => Ok(ReasoningType::Numerical),
            "predictive" => Ok(ReasoningType::Predictive),
            _ => contract(format!("unknown reasoning type {s:?}")),
        }
    }
}

impl Serialize for ReasoningType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ReasoningType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub options: Option<Vec<String>>,
    pub image_path: String,
    pub format: AnswerFormat,
    pub gold: GoldLabels,
    pub domain: Domain,
    pub subfield: String,
    pub reasoning_type: Option<ReasoningType>,
}

/// On-disk record shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    #[serde(default, alias = "image")]
    image_path: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    principle: Option<String>,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    subfield: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasoning_type: Option<String>,
}

impl ProblemRecord {
    fn into_problem(self) -> std::result::Result<Problem, String> {
        let mut missing = Vec::new();
        macro_rules! req {
            ($f:ident) => {
                match self.$f {
                    Some(v) => v,
                    None => {
                        missing.push(stringify!($f));
                        String::new()
                    }
                }
            };
        }
        let id = req!(id);
        let question = req!(question);
        let image_path = req!(image_path);
        let format = req!(format);
        let answer = req!(answer);
        let domain = req!(domain);
        let subfield = req!(subfield);
        if !missing.is_empty() {
            return Err(format!("missing required field(s): {}", missing.join(", ")));
        }
        let format = match format.trim().to_ascii_uppercase().as_str() {
            "MCQ" => AnswerFormat::Mcq,
            "OE" => AnswerFormat::Oe,
            other => return Err(format!("format must be \"MCQ\" or \"OE\", got {other:?}")),
        };
        let domain: Domain = domain.parse().map_err(|e: Error| e.to_string())?;
        let reasoning_type = self
            .reasoning_type
            .map(|r| r.parse::<ReasoningType>())
            .transpose()
            .map_err(|e| e.to_string())?;
        if id.trim().is_empty() {
            return Err("id is empty".into());
        }
        match (&self.options, format) {
            (Some(o), _) if o.len() != 4 => {
                return Err(format!("options must hold exactly 4 entries, got {}", o.len()));
            }
            (None, AnswerFormat::Mcq) => return Err("MCQ problem without options".into()),
            _ => {}
        }
        let gold = GoldLabels {
            answer,
            unit: self.unit.unwrap_or_default(),
            principle: self.principle.unwrap_or_default(),
            format,
        };
        gold.validate().map_err(|e| e.to_string())?;
        Ok(Problem {
            id,
            question,
            options: self.options,
            image_path,
            format,
            gold,
            domain,
            subfield,
            reasoning_type,
        })
    }

    fn from_problem(p: &Problem) -> Self {
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        Self {
            id: Some(p.id.clone()),
            question: Some(p.question.clone()),
            options: p.options.clone(),
            image_path: Some(p.image_path.clone()),
            format: Some(
                match p.format {
                    AnswerFormat::Mcq => "MCQ",
                    AnswerFormat::Oe => "OE",
                }
                .into(),
            ),
            answer: Some(p.gold.answer.clone()),
            unit: opt(&p.gold.unit),
            principle: opt(&p.gold.principle),
            domain: Some(p.domain.name().into()),
            subfield: Some(p.subfield.clone()),
            reasoning_type: p.reasoning_type.map(|r| r.name().into()),
        }
    }
}

/// Parses JSON-lines problems; any invalid line rejects the whole file.
pub fn parse_problems(text: &str, path: &Path) -> Result<Vec<Problem>> {
    let mut problems = Vec::new();
    let mut errors = Vec::new();
    let mut seen = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ProblemRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(ProblemRecord::into_problem);
        match parsed {
            Ok(p) => {
                if let Some(first) = seen.insert(p.id.clone(), line_no) {
                    errors.push(LineError {
                        line: line_no,
                        message: format!("duplicate id {:?} (first on line {first})", p.id),
                    });
                }
                problems.push(p);
            }
            Err(message) => errors.push(LineError { line: line_no, message }),
        }
    }
    if errors.is_empty() {
        Ok(problems)
    } else {
        Err(Error::Validation {
            path: path.to_path_buf(),
            errors,
        })
    }
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    let text = std::fs::read_to_string(path)?;
    parse_problems(&text, path)
}

pub fn problem_to_json(p: &Problem) -> Result<String> {
    Ok(serde_json::to_string(&ProblemRecord::from_problem(p))?)
}

pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in problems {
        writeln!(out, "{}", problem_to_json(p)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Number of problems per domain, in report column order.
pub fn domain_counts(problems: &[Problem]) -> BTreeMap<Domain, usize> {
    let mut counts = BTreeMap::new();
    for p in problems {
        *counts.entry(p.domain).or_insert(0) += 1;
    }
    counts
}

pub(crate) fn options_text(p: &Problem) -> String {
    p.options.as_ref().map(|o| o.join("\n")).unwrap_or_default()
}
