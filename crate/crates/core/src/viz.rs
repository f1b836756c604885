//! Attention dumps, grayscale heatmaps and failure reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::microgen::{is_b_only, matching, parse_question, Category, Corpus, Filter, Program, QASample, Scene};
use crate::model::{encode_samples, Batch};
use crate::trainer::{evaluate_with_predictions, Checkpoint};

pub const ATTENTION_FORMAT: &str = "smac-attention/1";
/// Nearest-neighbor upscale factor of heatmaps.
pub const HEATMAP_SCALE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpStep {
    /// One weight per question token.
    pub words: Vec<f64>,
    /// Row-major `h×w`.
    pub spatial: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sample_id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub steps: Vec<DumpStep>,
    pub predicted: String,
    pub gold: String,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    format: String,
    config: BTreeMap<String, String>,
}

/// P5 pixmap of one spatial attention map. Weights map affinely to
/// `min → 0`, `max → 255`; a constant map is mid-gray.
pub fn heatmap_pgm(spatial: &[f64], h: usize, w: usize, scale: usize) -> Result<Vec<u8>> {
    if spatial.len() != h * w || scale == 0 {
        return Err(Error::dim("heatmap", &[spatial.len()], &[h * w]));
    }
    let lo = spatial.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spatial.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |x: f64| -> u8 {
        if hi > lo {
            (255.0 * (x - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for r in 0..h * scale {
        for c in 0..w * scale {
            out.push(level(spatial[(r / scale) * w + c / scale]));
        }
    }
    Ok(out)
}

/// `token: weight` lines per step, weights to 4 decimals.
pub fn render_word_attention(dump: &AttentionDump) -> String {
    let mut out = String::new();
    for (i, step) in dump.steps.iter().enumerate() {
        let _ = writeln!(out, "step {}", i + 1);
        for (t, w) in dump.tokens.iter().zip(&step.words) {
            let _ = writeln!(out, "  {t}: {w:.4}");
        }
    }
    let _ = writeln!(out, "predicted: {}", dump.predicted);
    let _ = writeln!(out, "gold: {}", dump.gold);
    out
}

/// Inverse of [`render_word_attention`]: per-step `(token, weight)` lists.
pub fn parse_word_attention(text: &str) -> Result<Vec<Vec<(String, f64)>>> {
    let mut steps: Vec<Vec<(String, f64)>> = Vec::new();
    for line in text.lines() {
        if line.starts_with("step ") {
            steps.push(Vec::new());
        } else if let Some(entry) = line.strip_prefix("  ") {
            let (t, w) = entry
                .rsplit_once(": ")
                .ok_or_else(|| Error::format("word attention", format!("bad line {line:?}")))?;
            let w: f64 = w.parse().map_err(|_| Error::format("word attention", format!("bad weight {line:?}")))?;
            steps
                .last_mut()
                .ok_or_else(|| Error::format("word attention", "entry before first step"))?
                .push((t.to_string(), w));
        }
    }
    Ok(steps)
}

pub fn write_dumps(path: &Path, config: &KeyValues, dumps: &[AttentionDump]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DumpHeader {
        format: ATTENTION_FORMAT.into(),
        config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    write_json_line(&mut out, &header).map_err(|e| Error::io(path, e))?;
    for d in dumps {
        write_json_line(&mut out, d).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

pub fn read_dumps(path: &Path) -> Result<Vec<AttentionDump>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("attention dump", "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DumpHeader =
        serde_json::from_str(&first).map_err(|e| Error::format("attention dump", e.to_string()))?;
    if header.format != ATTENTION_FORMAT {
        return Err(Error::format("attention dump", format!("unsupported format {:?}", header.format)));
    }
    lines
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::format("attention dump", e.to_string()))
        })
        .collect()
}

/// Traces `samples` through the checkpoint.
pub fn collect_dumps(checkpoint: &Checkpoint, corpus: &Corpus, samples: &[QASample]) -> Result<Vec<AttentionDump>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let encoded = encode_samples(samples, &corpus.scene_map(), &checkpoint.vocab, &checkpoint.answers)?;
    let refs: Vec<_> = encoded.iter().collect();
    let mc = &checkpoint.model.config;
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, raw) in refs.chunks(crate::trainer::EVAL_BATCH).zip(samples.chunks(crate::trainer::EVAL_BATCH)) {
        let batch = Batch::<f64>::from_samples(chunk)?;
        for ((pred, traces), s) in checkpoint.model.trace(&batch)?.into_iter().zip(raw) {
            out.push(AttentionDump {
                sample_id: s.id.clone(),
                scene_id: s.scene_id.clone(),
                tokens: s.tokens.clone(),
                h: mc.h,
                w: mc.w,
                p: mc.p,
                steps: traces
                    .into_iter()
                    .map(|t| DumpStep {
                        words: t.cv,
                        spatial: t.rv,
                    })
                    .collect(),
                predicted: checkpoint.answers.token(pred).unwrap_or("?").to_string(),
                gold: s.answer.clone(),
            });
        }
    }
    Ok(out)
}

/// Writes `attention.jsonl`, one `<sample-id>.step<i>.pgm` per step and a
/// `<sample-id>.words.txt` per sample under `dir`.
pub fn dump_attention(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    samples: &[QASample],
    config: &KeyValues,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dumps = collect_dumps(checkpoint, corpus, samples)?;
    let mut written = Vec::new();
    let record = dir.join("attention.jsonl");
    write_dumps(&record, config, &dumps)?;
    written.push(record);
    for d in &dumps {
        for (i, step) in d.steps.iter().enumerate() {
            let path = dir.join(format!("{}.step{}.pgm", d.sample_id, i + 1));
            fs::write(&path, heatmap_pgm(&step.spatial, d.h, d.w, HEATMAP_SCALE)?).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join(format!("{}.words.txt", d.sample_id));
        fs::write(&path, render_word_attention(d)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub category: Category,
    pub gold: String,
    pub predicted: String,
    pub count: usize,
    pub out_of_condition: usize,
    pub sample_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSplit {
    pub errors: usize,
    pub total: usize,
}

impl ErrorSplit {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.errors as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub total: usize,
    pub errors: usize,
    pub accuracy: f64,
    pub cells: Vec<ConfusionCell>,
    pub in_condition: ErrorSplit,
    pub out_of_condition: ErrorSplit,
    /// Whether the corpus is a CoGenT condition, where the split applies.
    pub cogent: bool,
}

fn filters(program: &Program) -> Vec<&Filter> {
    let top: Vec<&Filter> = match program {
        Program::Exist(f) | Program::Count(f) => vec![f],
        Program::CompareInteger { left, right, .. } | Program::CompareAttribute { left, right, .. } => vec![left, right],
        Program::QueryAttribute { referent, .. } => vec![referent],
    };
    let mut all = Vec::new();
    let mut stack = top;
    while let Some(f) = stack.pop() {
        all.push(f);
        if let Some((_, anchor)) = &f.relation {
            stack.push(anchor);
        }
    }
    all
}

/// Whether the question names, or its filters select, a color/shape pair
/// that condition A never shows.
pub fn involves_b_only(scene: &Scene, sample: &QASample) -> Result<bool> {
    let program = parse_question(&sample.tokens)?;
    for f in filters(&program) {
        if let (Some(shape), Some(color)) = (f.shape, f.color) {
            if is_b_only(shape, color) {
                return Ok(true);
            }
        }
        if let Ok(idx) = matching(scene, f) {
            if idx.iter().any(|&i| is_b_only(scene.objects[i].shape, scene.objects[i].color)) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Misclassified samples grouped by (category, gold, predicted), largest
/// cells first. `category` restricts the report to one category.
pub fn failure_report(checkpoint: &Checkpoint, corpus: &Corpus, category: Option<Category>) -> Result<FailureReport> {
    let subset: Vec<QASample> = corpus
        .samples
        .iter()
        .filter(|s| category.is_none_or(|c| s.category == c))
        .cloned()
        .collect();
    let mut report = FailureReport {
        cogent: corpus.config.condition.to_ascii_lowercase().starts_with("cogent"),
        ..Default::default()
    };
    if subset.is_empty() {
        return Ok(report);
    }
    let view = corpus.subset(subset);
    let (metrics, preds) = evaluate_with_predictions(checkpoint, &view)?;
    let scenes = view.scene_map();
    let mut cells: BTreeMap<(Category, String, String), ConfusionCell> = BTreeMap::new();
    for (sample, pred) in view.samples.iter().zip(&preds) {
        let ooc = involves_b_only(scenes[sample.scene_id.as_str()], sample)?;
        let split = if ooc { &mut report.out_of_condition } else { &mut report.in_condition };
        split.total += 1;
        if pred.predicted == pred.gold {
            continue;
        }
        split.errors += 1;
        let predicted = checkpoint.answers.token(pred.predicted).unwrap_or("?").to_string();
        let cell = cells
            .entry((sample.category, sample.answer.clone(), predicted.clone()))
            .or_insert_with(|| ConfusionCell {
                category: sample.category,
                gold: sample.answer.clone(),
                predicted,
                count: 0,
                out_of_condition: 0,
                sample_ids: Vec::new(),
            });
        cell.count += 1;
        cell.out_of_condition += usize::from(ooc);
        cell.sample_ids.push(sample.id.clone());
    }
    report.total = metrics.total;
    report.errors = metrics.total - metrics.correct;
    report.accuracy = metrics.accuracy;
    report.cells = cells.into_values().collect();
    report.cells.sort_by_key(|c| std::cmp::Reverse(c.count));
    Ok(report)
}

impl FailureReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "samples {}  errors {}  accuracy {:.2}%",
            self.total,
            self.errors,
            100.0 * self.accuracy
        );
        if self.cogent {
            for (name, s) in [("in-condition", self.in_condition), ("out-of-condition", self.out_of_condition)] {
                let _ = writeln!(out, "{name}: {} / {} errors ({:.2}%)", s.errors, s.total, 100.0 * s.rate());
            }
        }
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<18} gold {:<9} predicted {:<9} count {:>5}  out-of-condition {:>5}",
                c.category.name(),
                c.gold,
                c.predicted,
                c.count,
                c.out_of_condition
            );
        }
        out
    }
}
