// One line per acceptance criterion. Runs as a single test so the timing
// criterion never shares the CPU with another test thread.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::grid::{oracle_disagreements, violates};
use common::{bias_shift_gap, embedding_forward_gap, embedding_gradient_gap, random_cell, random_lengths, run_cell, CellInputs};
use smac_core::cell::{count_allocated, count_parameters, init_cell_params, reduction_percent, MacVariant, UnitCounts};
use smac_core::microgen::{build_dataset, ConditionSpec, Corpus, DatasetConfig};
use smac_core::model::model_gradient_check;
use smac_core::tensor::ParamSet;
use smac_core::trainer::{
    evaluate, measure_step_time, run_experiment_matrix, standard_corpora, train, Checkpoint, ExperimentPlan,
    MatrixReport, StandardCorpora, TimingConfig, TrainConfig,
};
use smac_core::viz::failure_report;

struct Outcome {
    results: Vec<(String, bool)>,
}

impl Outcome {
    fn record(&mut self, id: &str, pass: bool, detail: String, start: Instant) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        // Straight to the stdout handle so the verdicts show without --nocapture.
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{verdict} {id}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
        let _ = stdout.flush();
        self.results.push((id.to_string(), pass));
    }
}

fn counts(control: usize, read: usize, write: usize) -> UnitCounts {
    UnitCounts { control, read, write }
}

fn parameter_counts(out: &mut Outcome) {
    let start = Instant::now();
    let mac = count_parameters(MacVariant::Original, 512);
    let smac = count_parameters(MacVariant::Simplified, 512);
    let mut ok = mac == counts(525_313, 787_969, 524_800) && smac == counts(263_168, 263_168, 262_656);
    ok &= reduction_percent(mac, smac) == counts(50, 67, 50);
    for variant in MacVariant::ALL {
        for d in [4, 16, 512] {
            let mut set = ParamSet::<f64>::new();
            init_cell_params(variant, d, &mut ChaCha8Rng::seed_from_u64(0), &mut set).unwrap();
            ok &= count_allocated(&set) == count_parameters(variant, d);
        }
    }
    out.record(
        "1 parameter counts",
        ok,
        format!("MAC {mac:?}, S-MAC {smac:?}, reduction {:?}", reduction_percent(mac, smac)),
        start,
    );
}

fn embedding(out: &mut Outcome) {
    let start = Instant::now();
    let (mut fwd, mut grad) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        fwd = fwd.max(embedding_forward_gap(seed, 8, 3, 3, 3, 5));
        grad = grad.max(embedding_gradient_gap(seed, 8, 3, 3, 3, 5));
    }
    out.record(
        "2 embedding",
        fwd < 1e-10 && grad < 1e-8,
        format!("50 draws, forward max-abs {fwd:.2e} (< 1e-10), gradient rel {grad:.2e} (< 1e-8)"),
        start,
    );
}

fn gradients(out: &mut Outcome) {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for variant in MacVariant::ALL {
        let r = model_gradient_check(variant, 8, 2, 200, 17).unwrap();
        ok &= r.checked >= 200 && r.max_rel_error < 1e-4;
        detail.push(format!("{variant} {} coords max rel {:.2e}", r.checked, r.max_rel_error));
    }
    out.record("3 gradient integrity", ok, format!("{} (< 1e-4)", detail.join(", ")), start);
}

fn attention(out: &mut Outcome) {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut negative = 0usize;
    for variant in MacVariant::ALL {
        for seed in 0..1000u64 {
            let params = random_cell(variant, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77E);
            let lengths = random_lengths(&mut rng, 2, 5);
            let inputs = CellInputs::random(&mut rng, 8, 3, 3, 3, &lengths);
            for trace in run_cell(&params, variant, &inputs).traces.iter().flatten() {
                for dist in [&trace.cv, &trace.rv] {
                    negative += dist.iter().filter(|&&x| x < 0.0).count();
                    worst_sum = worst_sum.max((dist.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let shift = (0..1000).map(|seed| bias_shift_gap(seed, 8, 3, 3, 3, 5)).fold(0.0, f64::max);
    out.record(
        "4 attention invariants",
        negative == 0 && worst_sum < 1e-10 && shift < 1e-10,
        format!("{negative} negative weights, max |sum - 1| {worst_sum:.2e}, bias shift gap {shift:.2e} (< 1e-10)"),
        start,
    );
}

fn dataset(out: &mut Outcome) {
    let start = Instant::now();
    let corpus = Corpus::generate(&DatasetConfig::new("cogent-a", 10_000, 5)).unwrap();
    let spec = ConditionSpec::cogent_a();
    let mut violations = 0;
    for scene in &corpus.scenes {
        violations += spec.violations(scene).len();
        violations += scene.objects.iter().filter(|o| violates("cogent-a", o.shape, o.color)).count();
    }
    let mismatches = oracle_disagreements(2025, 10_000);
    out.record(
        "5 dataset soundness",
        corpus.samples.len() == 10_000 && violations == 0 && mismatches == 0,
        format!("{} samples, {violations} violations, {mismatches} oracle mismatches over 10000 pairs", corpus.samples.len()),
        start,
    );
}

fn acc(report: &MatrixReport, v: MacVariant, train: &str, ft: Option<&str>, test: &str) -> Option<f64> {
    report.find(v, train, ft, test).and_then(|r| r.accuracy)
}

fn transfer(out: &mut Outcome, dir: &Path) -> (MatrixReport, Option<Checkpoint>, Corpus) {
    let start = Instant::now();
    let corpora = standard_corpora(&StandardCorpora::default()).unwrap();
    let train = TrainConfig {
        lr: 1e-3,
        epochs: 15,
        ..TrainConfig::default()
    };
    let finetune = TrainConfig {
        lr: 3e-4,
        epochs: 10,
        ..train
    };
    let plan = ExperimentPlan::full_grid(&MacVariant::ALL, train, finetune);
    let report = run_experiment_matrix(&plan, &corpora, Some(&dir.join("checkpoints")));
    report.write(dir).unwrap();
    let _ = writeln!(std::io::stdout(), "{}", report.to_table());
    for v in MacVariant::ALL {
        let zero = (acc(&report, v, "a-train", None, "a-test"), acc(&report, v, "a-train", None, "b-test"));
        let tuned = (
            acc(&report, v, "a-train", Some("b-ft"), "a-test"),
            acc(&report, v, "a-train", Some("b-ft"), "b-test"),
        );
        let (pass, detail) = match (zero, tuned) {
            ((Some(za), Some(zb)), (Some(ta), Some(tb))) => {
                let (gap, gain, drop) = (100.0 * (za - zb), 100.0 * (tb - zb), 100.0 * (za - ta));
                (
                    gap >= 5.0 && gain >= 8.0 && drop <= 12.0,
                    format!("A-B gap {gap:.2} (>= 5), B gain {gain:.2} (>= 8), A drop {drop:.2} (<= 12) points"),
                )
            }
            _ => (false, "missing matrix rows".to_string()),
        };
        out.record(&format!("6 transfer {v}"), pass, detail, start);
    }
    let smac_a = dir.join("checkpoints").join(format!("{}-a-train.ckpt", MacVariant::Simplified));
    let ckpt = Checkpoint::load(&smac_a, Some(MacVariant::Simplified)).ok();
    (report, ckpt, corpora["b-test"].clone())
}

fn failure_split(out: &mut Outcome, ckpt: Option<&Checkpoint>, b_test: &Corpus) {
    let start = Instant::now();
    let Some(ckpt) = ckpt else {
        out.record("6 failure split", false, "A-trained S-MAC checkpoint missing".into(), start);
        return;
    };
    let r = failure_report(ckpt, b_test, None).unwrap();
    let (inside, outside) = (r.in_condition.rate(), r.out_of_condition.rate());
    out.record(
        "6 failure split",
        outside > inside,
        format!(
            "S-MAC A-trained on B-test: out-of-condition error {:.2}% ({}/{}) vs in-condition {:.2}% ({}/{})",
            100.0 * outside,
            r.out_of_condition.errors,
            r.out_of_condition.total,
            100.0 * inside,
            r.in_condition.errors,
            r.in_condition.total
        ),
        start,
    );
}

fn timing(out: &mut Outcome) {
    let start = Instant::now();
    let config = TimingConfig::default();
    let mac = measure_step_time(MacVariant::Original, &config, 30).unwrap();
    let smac = measure_step_time(MacVariant::Simplified, &config, 30).unwrap();
    let ratio = smac.median / mac.median;
    out.record(
        "7 timing direction",
        smac.median < mac.median,
        format!(
            "{}: MAC median {:.1} ms, S-MAC median {:.1} ms, ratio {ratio:.4} ({:+.1}%)",
            config.fingerprint(),
            1e3 * mac.median,
            1e3 * smac.median,
            100.0 * (ratio - 1.0)
        ),
        start,
    );
}

fn pitfall(out: &mut Outcome, report: &MatrixReport, dir: &Path) {
    let start = Instant::now();
    let archived = dir.join("report.txt").is_file() && dir.join("report.jsonl").is_file();
    let mut ok = archived;
    let mut detail = vec![format!("archived in {}", dir.display())];
    for v in MacVariant::ALL {
        let zero = (acc(report, v, "clevr-train", None, "a-test"), acc(report, v, "clevr-train", None, "b-test"));
        let tuned = (
            acc(report, v, "clevr-train", Some("b-ft"), "a-test"),
            acc(report, v, "clevr-train", Some("b-ft"), "b-test"),
        );
        match (zero, tuned) {
            ((Some(za), Some(zb)), (Some(ta), Some(tb))) => detail.push(format!(
                "{v} A {:.2} -> {:.2}, B {:.2} -> {:.2}",
                100.0 * za,
                100.0 * ta,
                100.0 * zb,
                100.0 * tb
            )),
            _ => ok = false,
        }
    }
    ok &= report.rows.iter().all(|r| r.error.is_none());
    out.record("8 fine-tuning pitfall", ok, detail.join("; "), start);
}

fn persistence(out: &mut Outcome, dir: &Path) {
    let start = Instant::now();
    let mut config = DatasetConfig::new("cogent-b", 400, 77);
    config.scene.h = 3;
    config.scene.w = 3;
    let (a, b) = (dir.join("corpus-a"), dir.join("corpus-b"));
    let corpus = build_dataset(&config, &a).unwrap();
    build_dataset(&config, &b).unwrap();
    let same_bytes = [smac_core::microgen::SCENES_FILE, smac_core::microgen::QUESTIONS_FILE]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());

    let tiny = TrainConfig {
        d: 16,
        p: 2,
        batch_size: 16,
        lr: 1e-3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(&tiny, &corpus).unwrap();
    let path = dir.join("persist.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, Some(MacVariant::Simplified)).unwrap();
    let (before, after) = (evaluate(&ckpt, &corpus).unwrap(), evaluate(&loaded, &corpus).unwrap());
    out.record(
        "9 determinism and persistence",
        same_bytes && before == after && loaded.model.params == ckpt.model.params,
        format!("corpus bytes identical {same_bytes}, accuracy {:.4} -> {:.4}", before.accuracy, after.accuracy),
        start,
    );
}

#[test]
fn acceptance() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let mut out = Outcome { results: Vec::new() };
    let _ = writeln!(std::io::stdout());
    parameter_counts(&mut out);
    embedding(&mut out);
    gradients(&mut out);
    attention(&mut out);
    dataset(&mut out);
    timing(&mut out);
    let (report, ckpt, b_test) = transfer(&mut out, &dir);
    failure_split(&mut out, ckpt.as_ref(), &b_test);
    pitfall(&mut out, &report, &dir);
    persistence(&mut out, &dir);
    let failed: Vec<&str> = out.results.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
