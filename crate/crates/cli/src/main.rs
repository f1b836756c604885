use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use smac_core::cell::{count_parameters, reduction_percent, MacVariant};
use smac_core::config::KeyValues;
use smac_core::microgen::{
    build_dataset, Category, CategoryMix, Corpus, DatasetConfig, QuestionOptions, SceneConfig,
};
use smac_core::model::model_gradient_check;
use smac_core::trainer::{
    self, measure_step_time, run_experiment_matrix, standard_corpora, Checkpoint, ExperimentPlan, Metrics,
    StandardCorpora, TimingConfig, TrainConfig,
};
use smac_core::viz;

#[derive(Parser)]
#[command(name = "smac", version, about = "MAC and S-MAC reasoning cells on generated grid-world questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene/question corpus
    Generate(GenerateArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus
    Evaluate(EvaluateArgs),
    /// Continue training a checkpoint on a corpus shard
    Finetune(FinetuneArgs),
    /// Run the train / fine-tune / test experiment grid
    Matrix(MatrixArgs),
    /// Print per-unit cell parameter counts
    Params(ParamsArgs),
    /// Time optimizer steps of both variants on identical batches
    Timeit(TimeitArgs),
    /// Finite-difference check of the full model gradient
    Gradcheck(GradcheckArgs),
    /// Export attention traces and a failure report
    Viz(VizArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// File of key=value lines; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
}

impl HyperArgs {
    fn apply(&self, kv: &mut KeyValues) {
        set(kv, "variant", &self.variant);
        set(kv, "d", &self.d);
        set(kv, "p", &self.p);
        set(kv, "batch_size", &self.batch_size);
        set(kv, "lr", &self.lr);
        set(kv, "epochs", &self.epochs);
        set(kv, "seed", &self.seed);
        set(kv, "split", &self.split);
        set(kv, "clip", &self.clip);
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// clevr, cogent-a or cogent-b
    #[arg(long)]
    condition: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `uniform`, a category name, or name=weight,...
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    questions_per_scene: Option<usize>,
    #[arg(long)]
    relations: Option<bool>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Print metrics as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Comma-separated variants
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    finetune_fraction: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value = "smac")]
    variant: String,
    #[arg(long, default_value_t = 512)]
    d: usize,
}

#[derive(Args)]
struct TimeitArgs {
    #[arg(long, default_value_t = 512)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    p: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "smac")]
    variant: String,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest relative error accepted
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sample ids to dump; defaults to the first `--samples`
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Restrict the failure report to one category
    #[arg(long)]
    category: Option<String>,
}

type CliResult<T = ()> = Result<T, Failure>;

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<smac_core::Error> for Failure {
    fn from(e: smac_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn set<T: ToString>(kv: &mut KeyValues, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.set(key, v.to_string());
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<KeyValues> {
    match &arg.config {
        None => Ok(KeyValues::new()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

fn variant(s: &str) -> CliResult<MacVariant> {
    s.parse().map_err(|e: smac_core::Error| Failure::Usage(e.to_string()))
}

fn print_metrics(title: &str, m: &Metrics) {
    println!("{title}: accuracy {:.2}% ({} / {}), loss {:.4}", 100.0 * m.accuracy, m.correct, m.total, m.loss);
    for (c, s) in &m.per_category {
        println!("  {:<18} {:>6.2}% ({} / {})", c.name(), 100.0 * s.accuracy(), s.correct, s.total);
    }
    if m.step_seconds > 0.0 {
        println!("  mean step {:.2} ms over {} epochs", 1e3 * m.step_seconds, m.epoch_seconds.len());
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn generate(a: GenerateArgs) -> CliResult {
    let mut kv = load_config(&a.cfg)?;
    set(&mut kv, "condition", &a.condition);
    set(&mut kv, "n", &a.n);
    set(&mut kv, "seed", &a.seed);
    set(&mut kv, "mix", &a.mix);
    set(&mut kv, "questions_per_scene", &a.questions_per_scene);
    set(&mut kv, "relations", &a.relations);
    set(&mut kv, "h", &a.h);
    set(&mut kv, "w", &a.w);
    set(&mut kv, "min_objects", &a.min_objects);
    set(&mut kv, "max_objects", &a.max_objects);
    let scene = SceneConfig::default();
    let config = DatasetConfig {
        condition: kv.get("condition").unwrap_or("clevr").to_string(),
        n_samples: kv.parsed_or("n", 1000)?,
        mix: CategoryMix::parse(kv.get("mix").unwrap_or("uniform"))?,
        seed: kv.parsed_or("seed", 0)?,
        scene: SceneConfig {
            h: kv.parsed_or("h", scene.h)?,
            w: kv.parsed_or("w", scene.w)?,
            min_objects: kv.parsed_or("min_objects", scene.min_objects)?,
            max_objects: kv.parsed_or("max_objects", scene.max_objects)?,
        },
        questions_per_scene: kv.parsed_or("questions_per_scene", 1)?,
        options: QuestionOptions {
            relations: kv.parsed_or("relations", QuestionOptions::default().relations)?,
        },
    };
    let corpus = build_dataset(&config, &a.out)?;
    println!(
        "wrote {} samples over {} scenes to {}",
        corpus.samples.len(),
        corpus.scenes.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(cfg: &ConfigArg, hyper: &HyperArgs, base: TrainConfig) -> CliResult<TrainConfig> {
    let mut kv = load_config(cfg)?;
    hyper.apply(&mut kv);
    if let Some(v) = kv.get("variant") {
        variant(v)?;
    }
    Ok(TrainConfig::from_key_values(&kv, base)?)
}

fn train(a: TrainArgs) -> CliResult {
    let config = train_config(&a.cfg, &a.hyper, TrainConfig::default())?;
    let corpus = Corpus::read(&a.corpus)?;
    print!("{}", config.to_key_values());
    let (ckpt, metrics) = trainer::train(&config, &corpus)?;
    for h in &ckpt.history {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.2}%  val {:.2}%  {:.1}s",
            h.epoch,
            h.train_loss,
            100.0 * h.train_accuracy,
            100.0 * h.val_accuracy,
            h.seconds
        );
    }
    print_metrics("validation (selected checkpoint)", &metrics);
    ckpt.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint, None)?;
    let corpus = Corpus::read(&a.corpus)?;
    let m = trainer::evaluate(&ckpt, &corpus)?;
    if a.json {
        println!("{}", serde_json::to_string(&m).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        print!("{}", ckpt.train.to_key_values());
        print_metrics(&format!("{}", a.corpus.display()), &m);
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint, None)?;
    let base = TrainConfig {
        variant: ckpt.model.config.variant,
        epochs: 10,
        ..ckpt.train
    };
    let config = train_config(&a.cfg, &a.hyper, base)?;
    let shard = Corpus::read(&a.corpus)?;
    print!("{}", config.to_key_values());
    let (tuned, metrics) = trainer::finetune(&ckpt, &shard, &config)?;
    print_metrics("fine-tune shard", &metrics);
    tuned.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn matrix(a: MatrixArgs) -> CliResult {
    let mut kv = load_config(&a.cfg)?;
    set(&mut kv, "variants", &a.variants);
    set(&mut kv, "n_train", &a.n_train);
    set(&mut kv, "n_test", &a.n_test);
    set(&mut kv, "finetune_fraction", &a.finetune_fraction);
    set(&mut kv, "d", &a.d);
    set(&mut kv, "p", &a.p);
    set(&mut kv, "batch_size", &a.batch_size);
    set(&mut kv, "lr", &a.lr);
    set(&mut kv, "epochs", &a.epochs);
    set(&mut kv, "finetune_lr", &a.finetune_lr);
    set(&mut kv, "finetune_epochs", &a.finetune_epochs);
    set(&mut kv, "seed", &a.seed);
    let variants = kv
        .get("variants")
        .unwrap_or("mac,smac")
        .split(',')
        .map(|s| variant(s.trim()))
        .collect::<CliResult<Vec<_>>>()?;
    let train = TrainConfig::from_key_values(&kv, TrainConfig::default())?;
    let finetune = TrainConfig {
        lr: kv.parsed_or("finetune_lr", train.lr)?,
        epochs: kv.parsed_or("finetune_epochs", 10)?,
        ..train
    };
    let spec = StandardCorpora {
        n_train: kv.parsed_or("n_train", 20_000)?,
        n_test: kv.parsed_or("n_test", 20_000)?,
        finetune_fraction: kv.parsed_or("finetune_fraction", 0.2)?,
        seed: train.seed,
        ..StandardCorpora::default()
    };
    let corpora = standard_corpora(&spec)?;
    for (name, c) in &corpora {
        c.write(&a.out.join("corpora").join(name))?;
    }
    let plan = ExperimentPlan::full_grid(&variants, train, finetune);
    let report = run_experiment_matrix(&plan, &corpora, Some(&a.out.join("checkpoints")));
    report.write(&a.out)?;
    print!("{}", report.to_table());
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} matrix rows failed")));
    }
    Ok(())
}

fn params(a: ParamsArgs) -> CliResult {
    let v = variant(&a.variant)?;
    let counts = count_parameters(v, a.d);
    println!("{} d={}", v.display_name(), a.d);
    println!("control {}", group(counts.control));
    println!("read    {}", group(counts.read));
    println!("write   {}", group(counts.write));
    println!("total   {}", group(counts.total()));
    if v == MacVariant::Simplified {
        let r = reduction_percent(count_parameters(MacVariant::Original, a.d), counts);
        println!("reduction vs MAC: control {}% / read {}% / write {}%", r.control, r.read, r.write);
    }
    Ok(())
}

/// Thousands separated by commas.
fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn timeit(a: TimeitArgs) -> CliResult {
    let config = TimingConfig {
        d: a.d,
        p: a.p,
        batch_size: a.batch_size,
        warmup: a.warmup,
        seed: a.seed,
        ..TimingConfig::default()
    };
    println!("config {}", config.fingerprint());
    let mut medians = BTreeMap::new();
    for v in [MacVariant::Original, MacVariant::Simplified] {
        let s = measure_step_time(v, &config, a.steps)?;
        println!(
            "{:<6} median {:.2} ms  mean {:.2} ms  min {:.2} ms  max {:.2} ms  steps {}",
            v.display_name(),
            1e3 * s.median,
            1e3 * s.mean,
            1e3 * s.min,
            1e3 * s.max,
            s.steps
        );
        medians.insert(v.tag(), s.median);
    }
    let ratio = medians["smac"] / medians["mac"];
    println!("S-MAC / MAC median ratio {ratio:.4} ({:+.1}% wall time)", 100.0 * (ratio - 1.0));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let v = variant(&a.variant)?;
    let r = model_gradient_check(v, a.d, a.p, a.coords, a.seed)?;
    println!(
        "{} d={} p={} coords {} max relative error {:.3e}",
        v.display_name(),
        a.d,
        a.p,
        r.checked,
        r.max_rel_error
    );
    if let Some((name, i, an, num)) = &r.worst {
        println!("worst {name}[{i}] analytic {an:.6e} numeric {num:.6e}");
    }
    if r.max_rel_error >= a.tolerance {
        return Err(Failure::Runtime(format!("relative error above {}", a.tolerance)));
    }
    Ok(())
}

fn viz_cmd(a: VizArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint, None)?;
    let corpus = Corpus::read(&a.corpus)?;
    let samples: Vec<_> = if a.ids.is_empty() {
        corpus.samples.iter().take(a.samples).cloned().collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                corpus
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("no sample {id:?} in corpus")))
            })
            .collect::<CliResult<_>>()?
    };
    let category = a
        .category
        .as_deref()
        .map(|c| Category::from_name(c).ok_or_else(|| Failure::Usage(format!("unknown category {c:?}"))))
        .transpose()?;
    let mut echo = ckpt.train.to_key_values();
    echo.set("checkpoint", a.checkpoint.display());
    echo.set("corpus", a.corpus.display());
    let written = viz::dump_attention(&ckpt, &corpus, &samples, &echo, &a.out)?;
    let report = viz::failure_report(&ckpt, &corpus, category)?;
    let path = a.out.join("failures.txt");
    write_text(&path, &format!("{echo}\n{}", report.to_text()))?;
    println!("wrote {} files to {}", written.len() + 1, a.out.display());
    print!("{}", report.to_text());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Finetune(a) => finetune(a),
        Command::Matrix(a) => matrix(a),
        Command::Params(a) => params(a),
        Command::Timeit(a) => timeit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Viz(a) => viz_cmd(a),
    }
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
