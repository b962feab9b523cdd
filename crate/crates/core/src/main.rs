use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spanex::encoder::checkpoint::atomic_write;
use spanex::harness::convert::{convert_file, ConvertConfig};
use spanex::harness::dataset::{load_dataset, save_dataset};
use spanex::harness::eval::{predict, DecodeOptions};
use spanex::harness::gradcheck::{check_gradients, GradcheckConfig};
use spanex::harness::metrics::{compute_metric, Metric};
use spanex::harness::plan::{check_metric_schema, load_plan};
use spanex::harness::synth::{generate, SynthKind, SynthOptions};
use spanex::reformulation::AnswerSchema;
use spanex::training::{random_restarts, run_plan_with, selection_task};
use spanex::{DecodeMode, Error, Result, SpanModel};

#[derive(Parser)]
#[command(name = "spanex", version, about = "Span-extraction training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a GLUE TSV or SQuAD JSON file to JSONL.
    Convert(ConvertArgs),
    /// Train from a plan file; writes checkpoints and a JSONL report.
    Train(TrainArgs),
    /// Score a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients per tensor.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic train/dev suite.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Converter config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Raw input file.
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training plan (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the plan's run seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Decoding used for dev evaluation.
    #[arg(long)]
    mode: Option<DecodeMode>,
    /// Overrides the plan's restart count.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Task description with `metric` and `schema` (JSON), as written by `synth`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the metric of `--config`; defaults to exact_match.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long, default_value = "independent")]
    mode: DecodeMode,
    #[arg(long, default_value_t = spanex::span_decoder::DEFAULT_MAX_SPAN_LEN)]
    max_span_len: usize,
    /// Also write metrics.json and predictions.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Gradient-check config (JSON); defaults to a 2-layer d=16 model on p=10.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write gradcheck.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: Option<SynthKind>,
    /// Full generator options (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training examples.
    #[arg(long)]
    n: Option<usize>,
    /// Dev examples; defaults to n/4.
    #[arg(long)]
    dev_n: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Metric and answer schema of a dataset, shared by `synth` output and `eval` input.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskInfo {
    metric: Metric,
    #[serde(default = "span_schema")]
    schema: AnswerSchema,
}

fn span_schema() -> AnswerSchema {
    AnswerSchema::Span
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(&row)?);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut opts: SynthOptions = match &args.config {
        Some(p) => read_json(p)?,
        None => {
            let kind = args
                .kind
                .ok_or_else(|| Error::Config("synth needs --kind or --config".into()))?;
            SynthOptions::new(kind, args.n.unwrap_or(200), 0, args.vocab_size.unwrap_or(64))
        }
    };
    if let Some(k) = args.kind {
        opts.kind = k;
    }
    if let Some(n) = args.n {
        opts.train_size = n;
        opts.dev_size = (n / 4).max(1);
    }
    if let Some(n) = args.dev_n {
        opts.dev_size = n;
    }
    if let Some(v) = args.vocab_size {
        opts.vocab_size = v;
        if args.config.is_none() {
            opts.key_count = v / 2;
        }
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    let suite = generate(&opts)?;
    fs::create_dir_all(&args.out)?;
    save_dataset(args.out.join("train.jsonl"), &suite.train)?;
    save_dataset(args.out.join("dev.jsonl"), &suite.dev)?;
    write_json(
        &args.out.join("task.json"),
        &TaskInfo {
            metric: suite.metric,
            schema: suite.schema,
        },
    )?;
    write_json(&args.out.join("synth.json"), &opts)?;
    println!(
        "{}",
        serde_json::json!({"train": suite.train.len(), "dev": suite.dev.len(), "out": args.out})
    );
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<()> {
    let config: ConvertConfig = read_json(&args.config)?;
    let out = convert_file(&config, &args.input)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&args.out, &out.examples)?;
    println!(
        "{}",
        serde_json::json!({"examples": out.examples.len(), "skipped": out.skipped, "out": args.out})
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let loaded = load_plan(&args.config)?;
    let mut run = loaded.run.clone();
    if let Some(s) = args.seed {
        run.seed = s;
    }
    if let Some(m) = args.mode {
        run.decode_mode = m;
    }
    if let Some(r) = args.restarts {
        run.restarts = r;
    }
    run.validate()?;
    fs::create_dir_all(&args.out)?;

    let (model, report, best_seed, runs) = if run.restarts == 1 {
        let mut model = loaded.spec.build(run.seed)?;
        let out = args.out.clone();
        let report = run_plan_with(&mut model, &loaded.plan, &loaded.registry, &run, &mut |stage, m| {
            m.save(&out.join(format!("stage-{stage}")))
        })?;
        (model, report, run.seed, Vec::new())
    } else {
        let o = random_restarts(&loaded.spec, &loaded.plan, &loaded.registry, &run, run.restarts)?;
        (o.model, o.report, o.best_seed, o.runs)
    };
    model.save(&args.out.join("checkpoint"))?;
    write_jsonl(&args.out.join("report.jsonl"), report.records())?;

    let target = selection_task(&loaded.plan, &loaded.registry)?;
    let decode = DecodeOptions {
        mode: run.decode_mode,
        ..DecodeOptions::default()
    };
    let dev = if target.dev.is_empty() {
        None
    } else {
        Some(spanex::harness::eval::evaluate(&model, &target.dev, target.metric, &target.schema, decode)?)
    };
    let summary = serde_json::json!({
        "seed": best_seed,
        "restarts": runs.iter().map(|(s, v)| serde_json::json!({"seed": s, "dev_metric": v})).collect::<Vec<_>>(),
        "task": target.name,
        "dev": dev,
        "steps": report.stages.iter().map(|s| s.steps).collect::<Vec<_>>(),
        "weights_sha256": model.params.hash(),
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = SpanModel::load(&args.checkpoint)?;
    let examples = load_dataset(&args.data)?;
    let info: Option<TaskInfo> = args.config.as_deref().map(read_json).transpose()?;
    let schema = info.as_ref().map(|i| i.schema.clone()).unwrap_or(AnswerSchema::Span);
    let metric = args
        .metric
        .or(info.as_ref().map(|i| i.metric))
        .unwrap_or(Metric::ExactMatch);
    check_metric_schema(metric, &schema)?;
    let decode = DecodeOptions {
        mode: args.mode,
        max_span_len: args.max_span_len,
    };
    let preds = predict(&model, &examples, decode)?;
    let golds: Vec<String> = examples.iter().map(|e| e.gold_text().to_string()).collect();
    let report = compute_metric(&preds, &golds, metric, &schema)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("metrics.json"), &report)?;
        write_jsonl(
            &out.join("predictions.jsonl"),
            preds
                .iter()
                .zip(&golds)
                .map(|(p, g)| serde_json::json!({"prediction": p, "gold": g})),
        )?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let config: GradcheckConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    let checks = check_gradients(&config, args.seed)?;
    for c in &checks {
        println!("{}", serde_json::to_string(c)?);
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_jsonl(&out.join("gradcheck.jsonl"), &checks)?;
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn error_record(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert(a) => convert(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                error_record("gradcheck_failed", "one or more tensors exceed the tolerance");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_record(e.kind(), &e.to_string());
            ExitCode::from(2)
        }
    }
}
