use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pilab::methods::{
    build_benchmark, load_benchmark, preset, run_method, write_benchmark, Benchmark,
    ExperimentResult, MethodKind, MethodSettings, NoiseOverrides,
};
use pilab::pi::PiKind;
use pilab::relabel::Policy;
use pilab::report::{aggregate, write_table_csv, write_table_json, write_trace_csv, CellInput};
use pilab::train::EarlyStop;
use pilab::{Error, Result};

#[derive(Parser)]
#[command(name = "pilab", about = "Privileged-information methods for noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a benchmark dataset in the annotation CSV layout.
    Generate(GenerateArgs),
    /// Train methods over PI kinds and seeds.
    Run(RunArgs),
    /// Aggregate result files into a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    policy: Option<String>,
    /// Dataset seed (defaults to the preset's).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    preset: Option<String>,
    /// Directory written by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated method kinds.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated PI kinds.
    #[arg(long)]
    pi: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    policy: Option<String>,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pi_tower_width: Option<usize>,
    #[arg(long)]
    fx_width: Option<usize>,
    #[arg(long, conflicts_with = "early_stop")]
    no_early_stop: bool,
    #[arg(long)]
    early_stop: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `result-*.json` files.
    #[arg(long)]
    results: PathBuf,
    /// Output directory (defaults to the results directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Experiment description accepted by `run --config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentSpec {
    preset: Option<String>,
    dataset: Option<PathBuf>,
    methods: Vec<String>,
    pis: Vec<String>,
    beta: Option<f64>,
    policy: Option<String>,
    seeds: Vec<u64>,
    train: Option<serde_json::Value>,
    settings: Option<serde_json::Value>,
    out: Option<PathBuf>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::invalid("seeds", format!("cannot parse `{s}` (use a..b or a,b,c)"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn merge_json<T: Serialize + for<'de> Deserialize<'de>>(base: T, patch: &Option<serde_json::Value>, what: &'static str) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut value = serde_json::to_value(&base)?;
    let (Some(obj), Some(p)) = (value.as_object_mut(), patch.as_object()) else {
        return Err(Error::invalid(what, "must be a JSON object"));
    };
    for (k, v) in p {
        if !obj.contains_key(k) {
            return Err(Error::invalid(what, format!("unknown field `{k}`")));
        }
        obj.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

fn benchmark_from(preset_name: Option<&str>, dataset: Option<&Path>, overrides: NoiseOverrides) -> Result<Benchmark> {
    match (preset_name, dataset) {
        (_, Some(dir)) => load_benchmark(dir),
        (Some(name), None) => build_benchmark(&preset(name)?, overrides),
        (None, None) => Err(Error::invalid("preset", "pass --preset or --dataset")),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut spec = preset(&a.preset)?;
    if let Some(seed) = a.seed {
        spec.data.seed = seed;
    }
    let overrides = NoiseOverrides {
        beta: a.beta,
        policy: a.policy.as_deref().map(str::parse::<Policy>).transpose()?,
    };
    if let Some(b) = a.beta {
        if !(b > 0.0) {
            return Err(Error::invalid("beta", "must be > 0"));
        }
    }
    let bench = build_benchmark(&spec, overrides)?;
    write_benchmark(&bench, &a.out)?;
    println!("agreement={:.6}", bench.agreement());
    Ok(())
}

fn file_stem(method: MethodKind, pi: Option<PiKind>) -> String {
    match pi {
        Some(p) => format!("{}-{}", method, p),
        None => method.to_string(),
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let spec: ExperimentSpec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => ExperimentSpec::default(),
    };
    let preset_name = a.preset.clone().or(spec.preset.clone());
    let dataset = a.dataset.clone().or(spec.dataset.clone());
    let methods: Vec<MethodKind> = a
        .method
        .as_deref()
        .map(list)
        .unwrap_or(spec.methods.clone())
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::invalid("method", "pass --method"));
    }
    let pis: Vec<PiKind> = a
        .pi
        .as_deref()
        .map(list)
        .unwrap_or(spec.pis.clone())
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_>>()?;
    let seeds = match &a.seeds {
        Some(s) => parse_seeds(s)?,
        None if !spec.seeds.is_empty() => spec.seeds.clone(),
        None => vec![0],
    };
    let policy = a.policy.clone().or(spec.policy.clone());
    let overrides = NoiseOverrides {
        beta: a.beta.or(spec.beta),
        policy: policy.as_deref().map(str::parse::<Policy>).transpose()?,
    };
    let mut cfg = merge_json(pilab::methods::desk_config(), &spec.train, "train")?;
    if let Some(e) = a.epochs {
        cfg = cfg.with_epochs(e);
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if a.no_early_stop {
        cfg.early_stop = EarlyStop::None;
    }
    if let Some(m) = &a.early_stop {
        cfg.early_stop = m.parse()?;
    }
    cfg.validate()?;
    let mut settings = merge_json(MethodSettings::default(), &spec.settings, "settings")?;
    if let Some(w) = a.pi_tower_width {
        settings.tower_width = w;
    }
    if let Some(w) = a.fx_width {
        settings.fx_hidden = vec![w; settings.fx_hidden.len()];
    }
    if let Some(m) = a.mc_samples {
        settings.mc_samples = m;
    }
    if let Some(w) = a.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| Error::invalid("workers", e.to_string()))?;
    }
    let out = a.out.clone().or(spec.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let bench = benchmark_from(preset_name.as_deref(), dataset.as_deref(), overrides)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    for method in methods {
        let kinds: Vec<Option<PiKind>> = if !method.uses_pi() {
            vec![None]
        } else if pis.is_empty() {
            vec![Some(PiKind::Original)]
        } else {
            pis.iter().copied().map(Some).collect()
        };
        for pi in kinds {
            let result = run_method(&bench, method, pi, &cfg, &settings, &seeds)?;
            let stem = file_stem(method, result.pi);
            for run in &result.runs {
                write_trace_csv(&run.trace, &out.join(format!("trace-{stem}-seed{}.csv", run.seed)))?;
            }
            let path = out.join(format!("result-{stem}.json"));
            let text = serde_json::to_string_pretty(&result)? + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!(
                "{stem}: mean_test_acc={:.4} seeds={}",
                result.mean_accuracy(),
                result.runs.len()
            );
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let entries = std::fs::read_dir(&a.results).map_err(|e| Error::io(&a.results, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("result-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(
            "results",
            format!("no result-*.json files in {}", a.results.display()),
        ));
    }
    let mut cells = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let r: ExperimentResult = serde_json::from_str(&text)?;
        cells.push(CellInput {
            group: r.dataset.clone(),
            method: r.method.to_string(),
            pi: r.pi.map_or_else(|| "none".to_string(), |p| p.to_string()),
            accuracies: r.accuracies(),
        });
    }
    let mut expected: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &cells {
        let e = expected.entry(&c.group).or_insert(0);
        *e = (*e).max(c.accuracies.len());
    }
    for c in &cells {
        let want = expected[c.group.as_str()];
        if c.accuracies.len() < want {
            eprintln!(
                "warning: {}/{}/{} has {} of {} seeds",
                c.group,
                c.method,
                c.pi,
                c.accuracies.len(),
                want
            );
        }
    }
    let table = aggregate(&cells)?;
    let out = a.out.unwrap_or(a.results);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_table_json(&table, &out.join("table.json"))?;
    write_table_csv(&table, &out.join("table.csv"))?;
    for c in &table.cells {
        let std = c.std.map_or_else(String::new, |s| format!(" ± {:.4}", s));
        println!(
            "{} {} {} {:.4}{}{}",
            c.group,
            c.method,
            c.pi,
            c.mean,
            std,
            if c.bold { " *" } else { "" }
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
