//! Train → optional fine-tune → test grid over named corpora.
//!
//! Corpus names used by [`ExperimentPlan::full_grid`] and
//! [`standard_corpora`]: `clevr-train`, `a-train`, `clevr-test`, and for
//! each CoGenT condition a fine-tune shard (`a-ft`, `b-ft`) with its
//! disjoint held-out test shard (`a-test`, `b-test`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, finetune, train, Checkpoint, TrainConfig};
use crate::cell::MacVariant;
use crate::error::{Error, Result};
use crate::microgen::{child_seed, split_shards, Corpus, DatasetConfig, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub label: Option<String>,
    pub corpus: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub variant: MacVariant,
    pub train: String,
    pub finetune: Option<String>,
    pub tests: Vec<TestSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub rows: Vec<PlanRow>,
    /// Training hyper-parameters; `variant` is taken from each row.
    pub train: TrainConfig,
    pub finetune: TrainConfig,
}

fn tests(specs: &[(&str, Option<&str>)]) -> Vec<TestSpec> {
    specs
        .iter()
        .map(|(c, l)| TestSpec {
            label: l.map(str::to_string),
            corpus: c.to_string(),
        })
        .collect()
}

impl ExperimentPlan {
    pub fn empty(train: TrainConfig, finetune: TrainConfig) -> Self {
        Self {
            rows: Vec::new(),
            train,
            finetune,
        }
    }

    /// Full comparison grid for the given variants. Simplified rows carry
    /// the labels (b)–(j); the original CLEVR/CLEVR row is (a).
    pub fn full_grid(variants: &[MacVariant], train: TrainConfig, finetune: TrainConfig) -> Self {
        let mut rows = Vec::new();
        for &v in variants {
            let s = v == MacVariant::Simplified;
            let l = |simplified: &'static str| s.then_some(simplified);
            let row = |train: &str, ft: Option<&str>, t: Vec<TestSpec>| PlanRow {
                variant: v,
                train: train.into(),
                finetune: ft.map(str::to_string),
                tests: t,
            };
            rows.push(row(
                "clevr-train",
                None,
                tests(&[
                    ("clevr-test", Some(if s { "b" } else { "a" })),
                    ("a-test", l("d")),
                    ("b-test", l("e")),
                ]),
            ));
            rows.push(row("clevr-train", Some("a-ft"), tests(&[("a-test", None), ("b-test", None)])));
            rows.push(row("clevr-train", Some("b-ft"), tests(&[("a-test", l("i")), ("b-test", l("j"))])));
            rows.push(row("a-train", None, tests(&[("a-test", l("c")), ("b-test", l("f"))])));
            rows.push(row("a-train", Some("b-ft"), tests(&[("a-test", l("g")), ("b-test", l("h"))])));
        }
        Self { rows, train, finetune }
    }

    pub fn corpus_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| {
                std::iter::once(r.train.clone())
                    .chain(r.finetune.clone())
                    .chain(r.tests.iter().map(|t| t.corpus.clone()))
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Sizes and seed for [`standard_corpora`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardCorpora {
    pub n_train: usize,
    pub n_test: usize,
    pub finetune_fraction: f64,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for StandardCorpora {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_test: 20_000,
            finetune_fraction: 0.2,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

/// Builds every corpus [`ExperimentPlan::full_grid`] refers to.
pub fn standard_corpora(spec: &StandardCorpora) -> Result<BTreeMap<String, Corpus>> {
    let make = |cond: &str, n: usize, k: u64| {
        let mut cfg = DatasetConfig::new(cond, n, child_seed(spec.seed, k));
        cfg.scene = spec.scene;
        Corpus::generate(&cfg)
    };
    let mut out = BTreeMap::new();
    out.insert("clevr-train".into(), make("clevr", spec.n_train, 0)?);
    out.insert("a-train".into(), make("cogent-a", spec.n_train, 1)?);
    out.insert("clevr-test".into(), make("clevr", spec.n_test, 2)?);
    for (cond, prefix, k) in [("cogent-a", "a", 3), ("cogent-b", "b", 4)] {
        let full = make(cond, spec.n_test, k)?;
        let (ft, held) = split_shards(&full, spec.finetune_fraction, child_seed(spec.seed, 100 + k))?;
        out.insert(format!("{prefix}-ft"), ft);
        out.insert(format!("{prefix}-test"), held);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: Option<String>,
    pub model: MacVariant,
    pub train_set: String,
    pub train_seconds: f64,
    /// Validation accuracy of the selected checkpoint.
    pub train_accuracy: f64,
    pub finetune_set: Option<String>,
    pub finetune_seconds: Option<f64>,
    pub finetune_accuracy: Option<f64>,
    pub test_set: String,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<ReportRow>,
    /// Effective hyper-parameters, `key=value` lines.
    pub train_config: String,
    pub finetune_config: String,
}

fn hms(seconds: f64) -> String {
    let s = seconds.round() as u64;
    format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
}

fn pct(x: Option<f64>) -> String {
    x.map_or("--".into(), |a| format!("{:.2}", 100.0 * a))
}

impl MatrixReport {
    pub fn find(&self, model: MacVariant, train: &str, finetune: Option<&str>, test: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.model == model && r.train_set == train && r.finetune_set.as_deref() == finetune && r.test_set == test
        })
    }

    pub fn by_label(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label.as_deref() == Some(label))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = [
            "Model", "Train set", "Time", "Acc [%]", "Fine-tune set", "Time", "Acc [%]", "Test set", "Acc [%]", "Row",
        ];
        let cells: Vec<[String; 10]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.display_name().to_string(),
                    r.train_set.clone(),
                    hms(r.train_seconds),
                    pct(Some(r.train_accuracy)),
                    r.finetune_set.clone().unwrap_or("--".into()),
                    r.finetune_seconds.map_or("--".into(), hms),
                    pct(r.finetune_accuracy),
                    r.test_set.clone(),
                    match &r.error {
                        Some(_) => "failed".into(),
                        None => pct(r.accuracy),
                    },
                    r.label.as_ref().map_or(String::new(), |l| format!("({l})")),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |out: &mut String, row: &[&str]| {
            let mut s = String::new();
            for (i, c) in row.iter().enumerate() {
                let _ = write!(s, "{:<w$}  ", c, w = widths[i]);
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&mut out, &header);
        line(&mut out, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                out,
                "error {} {} -> {}: {}",
                r.model,
                r.train_set,
                r.test_set,
                r.error.as_deref().unwrap_or("")
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("report rows serialize") + "\n")
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = dir.join("report.txt");
        let mut text = String::new();
        text.push_str("# training\n");
        text.push_str(&self.train_config);
        text.push_str("# fine-tuning\n");
        text.push_str(&self.finetune_config);
        text.push('\n');
        text.push_str(&self.to_table());
        std::fs::write(&table, text).map_err(|e| Error::io(&table, e))?;
        let jsonl = dir.join("report.jsonl");
        std::fs::write(&jsonl, self.to_jsonl()).map_err(|e| Error::io(&jsonl, e))
    }
}

struct Trained {
    checkpoint: Checkpoint,
    seconds: f64,
    accuracy: f64,
    path: Option<String>,
}

fn save(ckpt: &Checkpoint, out_dir: Option<&Path>, name: &str) -> Result<Option<String>> {
    match out_dir {
        Some(dir) => {
            let path = dir.join(format!("{name}.ckpt"));
            ckpt.save(&path)?;
            Ok(Some(path.display().to_string()))
        }
        None => Ok(None),
    }
}

fn lookup<'a>(corpora: &'a BTreeMap<String, Corpus>, name: &str) -> Result<&'a Corpus> {
    corpora
        .get(name)
        .ok_or_else(|| Error::contract(format!("plan references unknown corpus {name:?}")))
}

/// Runs every row. Trained and fine-tuned checkpoints are shared between
/// rows with the same (variant, train set, fine-tune set); failures are
/// recorded per row and do not stop the run. Checkpoints are written to
/// `out_dir` when given.
pub fn run_experiment_matrix(
    plan: &ExperimentPlan,
    corpora: &BTreeMap<String, Corpus>,
    out_dir: Option<&Path>,
) -> MatrixReport {
    let mut trained: HashMap<(MacVariant, String), std::result::Result<Trained, String>> = HashMap::new();
    let mut tuned: HashMap<(MacVariant, String, String), std::result::Result<Trained, String>> = HashMap::new();
    let mut report = MatrixReport {
        rows: Vec::new(),
        train_config: plan.train.to_key_values().to_string(),
        finetune_config: plan.finetune.to_key_values().to_string(),
    };
    for row in &plan.rows {
        let base = trained
            .entry((row.variant, row.train.clone()))
            .or_insert_with(|| {
                let config = TrainConfig {
                    variant: row.variant,
                    ..plan.train
                };
                let start = Instant::now();
                let corpus = lookup(corpora, &row.train).map_err(|e| e.to_string())?;
                let (checkpoint, metrics) = train(&config, corpus).map_err(|e| e.to_string())?;
                let path = save(&checkpoint, out_dir, &format!("{}-{}", row.variant, row.train)).map_err(|e| e.to_string())?;
                Ok(Trained {
                    checkpoint,
                    seconds: start.elapsed().as_secs_f64(),
                    accuracy: metrics.accuracy,
                    path,
                })
            })
            .as_ref()
            .map(|t| (t.checkpoint.clone(), t.seconds, t.accuracy, t.path.clone()))
            .map_err(Clone::clone);

        let model = match (&base, &row.finetune) {
            (Err(e), _) => Err(e.clone()),
            (Ok((ckpt, _, _, path)), None) => Ok((ckpt.clone(), None, None, path.clone())),
            (Ok((ckpt, _, _, _)), Some(ft)) => tuned
                .entry((row.variant, row.train.clone(), ft.clone()))
                .or_insert_with(|| {
                    let config = TrainConfig {
                        variant: row.variant,
                        ..plan.finetune
                    };
                    let start = Instant::now();
                    let shard = lookup(corpora, ft).map_err(|e| e.to_string())?;
                    let (checkpoint, metrics) = finetune(ckpt, shard, &config).map_err(|e| e.to_string())?;
                    let name = format!("{}-{}-ft-{}", row.variant, row.train, ft);
                    let path = save(&checkpoint, out_dir, &name).map_err(|e| e.to_string())?;
                    Ok(Trained {
                        checkpoint,
                        seconds: start.elapsed().as_secs_f64(),
                        accuracy: metrics.accuracy,
                        path,
                    })
                })
                .as_ref()
                .map(|t| (t.checkpoint.clone(), Some(t.seconds), Some(t.accuracy), t.path.clone()))
                .map_err(Clone::clone),
        };

        for test in &row.tests {
            let mut out = ReportRow {
                label: test.label.clone(),
                model: row.variant,
                train_set: row.train.clone(),
                train_seconds: base.as_ref().map_or(0.0, |b| b.1),
                train_accuracy: base.as_ref().map_or(0.0, |b| b.2),
                finetune_set: row.finetune.clone(),
                finetune_seconds: None,
                finetune_accuracy: None,
                test_set: test.corpus.clone(),
                accuracy: None,
                error: None,
                checkpoint: None,
            };
            let result = model.as_ref().map_err(Clone::clone).and_then(|(ckpt, ft_s, ft_a, path)| {
                out.finetune_seconds = *ft_s;
                out.finetune_accuracy = *ft_a;
                out.checkpoint = path.clone();
                let corpus = lookup(corpora, &test.corpus).map_err(|e| e.to_string())?;
                if let Some(ft) = &row.finetune {
                    let shard = lookup(corpora, ft).map_err(|e| e.to_string())?;
                    let ids: HashSet<&str> = shard.samples.iter().map(|s| s.id.as_str()).collect();
                    if let Some(s) = corpus.samples.iter().find(|s| ids.contains(s.id.as_str())) {
                        return Err(format!("sample {} is in both {ft} and {}", s.id, test.corpus));
                    }
                }
                evaluate(ckpt, corpus).map(|m| m.accuracy).map_err(|e| e.to_string())
            });
            match result {
                Ok(a) => out.accuracy = Some(a),
                Err(e) => out.error = Some(e),
            }
            report.rows.push(out);
        }
    }
    report
}
