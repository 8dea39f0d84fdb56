use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use phyreward::attention::{write_capture, AttentionCapture};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phyreward"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn phyreward")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn eval_fixture(name: &str) -> String {
    workspace()
        .join("crates/core/tests/fixtures/eval")
        .join(name)
        .display()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_lines(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).unwrap();
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn assert_png(path: &Path) {
    let bytes = std::fs::read(path).unwrap();
    assert!(bytes.starts_with(b"\x89PNG\r\n\x1a\n"), "{} is not a PNG", path.display());
    let img = image::load_from_memory(&bytes).unwrap();
    assert!(img.width() > 0 && img.height() > 0);
}

const REASONING: &str = "The block slides without friction so mechanical energy is conserved along the ramp.";

/// One MCQ and one open-ended problem, each answered perfectly, plus a
/// 4×4-patch capture per completion over a 16×16 image.
fn scoring_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let problems = dir.join("problems.jsonl");
    write_lines(
        &problems,
        &[
            json!({"id": "m1", "question": "Which option?", "image_path": "img.png", "format": "MCQ",
                   "options": ["A) 1", "B) 2", "C) 3", "D) 4"], "answer": "B", "unit": "m/s",
                   "principle": "conservation of energy", "domain": "Mechanics", "subfield": "Dynamics"}),
            json!({"id": "o1", "question": "How fast?", "image_path": "img.png", "format": "OE",
                   "answer": "4 m/s", "unit": "m/s", "principle": "conservation of energy",
                   "domain": "Mechanics", "subfield": "Dynamics"}),
        ],
    );
    let mut img = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
    for y in 0..8 {
        for x in 0..8 {
            img.put_pixel(x, y, Rgb([10, 10, 10]));
        }
    }
    img.save(dir.join("img.png")).unwrap();
    for (i, stem) in ["cap_m1", "cap_o1"].iter().enumerate() {
        let t = 18;
        let mut q = Array2::<f32>::zeros((t, 2));
        let mut k = Array2::<f32>::zeros((t, 2));
        for r in 0..t {
            q[[r, 0]] = 1.0 + i as f32;
            k[[r, 0]] = ((r * 7 + i) % 5) as f32 * 0.5;
            k[[r, 1]] = ((r * 3) % 4) as f32 * 0.25;
        }
        let capture = AttentionCapture {
            q,
            k,
            cos: Array2::ones((t, 2)),
            sin: Array2::zeros((t, 2)),
            n_heads: 1,
            n_kv_heads: 1,
            head_dim: 2,
            alpha: 1.0 / 2f64.sqrt(),
            image_span: 1..17,
            grid_side: 4,
            generated: 17..18,
            image_size: Some((16, 16)),
        };
        write_capture(&capture, &dir.join("captures"), stem).unwrap();
    }
    let completions = dir.join("completions.jsonl");
    let text = |answer: &str| {
        format!(
            "<think>{REASONING}</think><answer>{answer}</answer><unit>m/s</unit><principle>conservation of energy</principle>"
        )
    };
    write_lines(
        &completions,
        &[
            json!({"problem_id": "m1", "text": text("B"), "captures": ["captures/cap_m1.json"]}),
            json!({"problem_id": "o1", "text": text("4 m/s"), "captures": ["captures/cap_o1.json"]}),
        ],
    );
    (problems, completions)
}

fn score(problems: &Path, completions: &Path, reward: &str) -> Vec<Value> {
    let out = ok(&["score", "--problems", s(problems), "--completions", s(completions), "--reward", reward]);
    out.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn combined(rows: &[Value]) -> Vec<f64> {
    rows.iter().map(|r| r["combined"].as_f64().unwrap()).collect()
}

#[test]
fn fmt_condition_on_well_formed_completions_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = scoring_fixture(dir.path());
    let rows = score(&p, &c, "Fmt");
    assert_eq!(combined(&rows), [1.0, 1.0]);
    assert!(rows.iter().all(|r| r["condition"] == "Fmt"));
}

#[test]
fn rubric_on_perfect_open_ended_completion_loses_only_the_length_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = scoring_fixture(dir.path());
    let rows = score(&p, &c, "Rubric");
    let oe = rows.iter().find(|r| r["problem_id"] == "o1").unwrap();
    let text = format!(
        "<think>{REASONING}</think><answer>4 m/s</answer><unit>m/s</unit><principle>conservation of energy</principle>"
    );
    let lp = text.chars().count() as f64 / 4000.0;
    assert!((oe["combined"].as_f64().unwrap() - (1.0 - lp)).abs() < 1e-12, "{oe}");
    assert_eq!(oe["jury"]["r_a"], 1.0);
    assert_eq!(oe["rubric"]["result"]["length_penalty"].as_f64().unwrap(), lp);
}

#[test]
fn summed_condition_equals_sum_of_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = scoring_fixture(dir.path());
    let sum = combined(&score(&p, &c, "Fmt+Acc+ASM"));
    let parts: Vec<Vec<f64>> = ["Fmt", "Acc", "ASM"].iter().map(|r| combined(&score(&p, &c, r))).collect();
    for i in 0..sum.len() {
        let expected: f64 = parts.iter().map(|v| v[i]).sum();
        assert!((sum[i] - expected).abs() < 1e-12, "{sum:?} vs {parts:?}");
    }
    assert!(parts[2].iter().all(|&a| (0.0..=1.0).contains(&a)));
}

#[test]
fn score_writes_to_file_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = scoring_fixture(dir.path());
    let out = dir.path().join("scores.jsonl");
    let stdout = ok(&["score", "--problems", s(&p), "--completions", s(&c), "--out", s(&out)]);
    assert!(stdout.is_empty());
    assert_eq!(read_jsonl(&out).len(), 2);
}

#[test]
fn asm_without_captures_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = scoring_fixture(dir.path());
    let c = dir.path().join("bare.jsonl");
    write_lines(&c, &[json!({"problem_id": "m1", "text": "<answer>B</answer>"})]);
    let out = run(&["score", "--problems", s(&p), "--completions", s(&c), "--reward", "ASM"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("m1"));
}

#[test]
fn attn_writes_scores_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    scoring_fixture(dir.path());
    let out = dir.path().join("attn");
    let cap = dir.path().join("captures/cap_m1.json");
    let img = dir.path().join("img.png");
    let stdout = ok(&["attn", "--capture", s(&cap), "--image", s(&img), "--out", s(&out)]);
    let printed: Value = serde_json::from_str(stdout.trim()).unwrap();
    let saved: Value = serde_json::from_slice(&std::fs::read(out.join("scores.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    let asm = saved["asm"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&asm));
    for f in ["token_000.png", "cumulative_overlay.png", "cumulative_heatmap.png"] {
        assert_png(&out.join(f));
    }
}

#[test]
fn attn_reports_bad_manifest_field() {
    let dir = tempfile::tempdir().unwrap();
    scoring_fixture(dir.path());
    let cap = dir.path().join("captures/cap_m1.json");
    let mut manifest: Value = serde_json::from_slice(&std::fs::read(&cap).unwrap()).unwrap();
    manifest["format"] = json!("something-else");
    std::fs::write(&cap, manifest.to_string()).unwrap();
    let img = dir.path().join("img.png");
    let out = run(&["attn", "--capture", s(&cap), "--image", s(&img), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}

#[test]
fn smoke_training_is_byte_identical_and_plots_are_png() {
    let cfg = workspace().join("configs/toy_smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train-toy", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["--jobs", "1", "train-toy", "--config", s(&cfg), "--out", s(&b)]);
    let ha = std::fs::read(a.join("history.jsonl")).unwrap();
    assert_eq!(ha, std::fs::read(b.join("history.jsonl")).unwrap());
    let history = read_jsonl(&a.join("history.jsonl"));
    assert_eq!(history.len(), 50);
    let mean = |rows: &[Value]| rows.iter().map(|r| r["mean_reward"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!(mean(&history[40..]) > mean(&history[..10]));
    for f in ["rewards.png", "tokens.png"] {
        assert_png(&a.join(f));
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 50);
}

#[test]
fn training_overrides_apply() {
    let cfg = workspace().join("configs/toy_smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    ok(&["train-toy", "--config", s(&cfg), "--out", s(dir.path()), "--steps", "3", "--seed", "9"]);
    assert_eq!(read_jsonl(&dir.path().join("history.jsonl")).len(), 3);
}

#[test]
fn bad_training_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nsteps = 2\nreward = \"ASM\"\n[task]\nkind = \"format\"\n").unwrap();
    let out = run(&["train-toy", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn offline_eval_matches_scorecard() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--problems",
        &eval_fixture("problems.jsonl"),
        "--completions",
        &eval_fixture("completions.jsonl"),
        "--out",
        s(&out),
        "--chart",
    ]);
    let card: Value = serde_json::from_slice(&std::fs::read(eval_fixture("scorecard.json")).unwrap()).unwrap();
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let overall = &card["overall"];
    for field in ["answer", "unit", "principle"] {
        assert_eq!(report["overall"][field]["correct"], overall[field][0], "{field}");
        assert_eq!(report["overall"][field]["total"], overall[field][1], "{field}");
    }
    let answers: Vec<&str> = stdout
        .lines()
        .find(|l| l.starts_with("answer"))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .collect();
    assert_eq!(answers, ["0.600", "0.500", "0.500", "0.500", "1.000", "1.000", "0.000"]);
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), stdout);
    assert_eq!(read_jsonl(&out.join("records.jsonl")).len(), 10);
    assert_png(&out.join("domains.png"));
}

#[test]
fn eval_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.jsonl");
    write_lines(&c, &[json!({"problem_id": "zzz", "text": ""})]);
    let out = run(&["eval", "--problems", &eval_fixture("problems.jsonl"), "--completions", s(&c), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzz"));
}

#[test]
fn report_prints_mean_of_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good");
    let blank = dir.path().join("blank");
    ok(&["eval", "--problems", &eval_fixture("problems.jsonl"), "--completions", &eval_fixture("completions.jsonl"), "--out", s(&good)]);
    let empty = dir.path().join("empty.jsonl");
    let rows: Vec<Value> = read_jsonl(Path::new(&eval_fixture("completions.jsonl")))
        .iter()
        .map(|r| json!({"problem_id": r["problem_id"], "text": ""}))
        .collect();
    write_lines(&empty, &rows);
    ok(&["eval", "--problems", &eval_fixture("problems.jsonl"), "--completions", s(&empty), "--out", s(&blank)]);
    let mean_path = dir.path().join("mean.json");
    let chart = dir.path().join("mean.png");
    let stdout = ok(&[
        "report",
        s(&good.join("report.json")),
        s(&blank.join("report.json")),
        "--out",
        s(&mean_path),
        "--chart",
        s(&chart),
    ]);
    let mean: Value = serde_json::from_slice(&std::fs::read(&mean_path).unwrap()).unwrap();
    assert_eq!(mean["reports"], 2);
    assert!((mean["overall"]["answer"]["mean"].as_f64().unwrap() - 0.3).abs() < 1e-12);
    assert!((mean["overall"]["answer"]["std"].as_f64().unwrap() - 0.3).abs() < 1e-12);
    let answer_row = stdout.lines().find(|l| l.starts_with("answer ")).unwrap();
    assert_eq!(answer_row.split_whitespace().nth(1), Some("0.300"));
    assert_png(&chart);
}

#[test]
fn report_rejects_malformed_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("r.json");
    std::fs::write(&bad, "{\"overall\": 3}").unwrap();
    let out = run(&["report", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("r.json"));
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn label_with_stub_judge_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let problems = dir.path().join("p.jsonl");
    let questions = [
        "What is the speed of the block at the bottom?",
        "Find the tension force in the cable.",
        "What is the angle of refraction in the glass?",
        "How much energy is stored in the spring?",
        "What is the ratio of the two periods?",
    ];
    let rows: Vec<Value> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            json!({"id": format!("q{i}"), "question": q, "image_path": "x.png", "format": "OE",
                   "answer": "1", "domain": "Mechanics", "subfield": "Dynamics"})
        })
        .collect();
    write_lines(&problems, &rows);
    for ontology in ["cluster", "standard-v1"] {
        let (a, b) = (dir.path().join(format!("{ontology}-a")), dir.path().join(format!("{ontology}-b")));
        let out_a = ok(&["label", "--problems", s(&problems), "--out", s(&a), "--ontology", ontology]);
        let out_b = ok(&["label", "--problems", s(&problems), "--out", s(&b), "--ontology", ontology, "--jobs", "2"]);
        assert_eq!(out_a, out_b);
        assert_eq!(tree(&a), tree(&b));
        let manifest: Value = serde_json::from_str(&out_a).unwrap();
        let total: u64 = manifest["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, 5);
        for f in ["raw_labels.jsonl", "ontology.json", "assignments.jsonl", "manifest.json"] {
            assert!(a.join(f).exists(), "{ontology}: {f}");
        }
    }
}

#[test]
fn usage_errors_exit_nonzero() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["score", "--problems"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = scoring_fixture(dir.path());
    let out = run(&["score", "--problems", s(&p), "--completions", s(&c), "--reward", "Speed"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["score", "--problems", s(&p), "--completions", s(&c), "--n-judges", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = dir.path().join("missing.jsonl");
    let out = run(&["eval", "--problems", s(&missing), "--completions", s(&c), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}
