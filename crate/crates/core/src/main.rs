use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crossfuse::envsim::Scenario;
use crossfuse::harness::analytics::mean_std;
use crossfuse::harness::bench::{counting_active, write_bench};
use crossfuse::harness::train::{fmt_opt, summarize_eval, summary_fields, summary_row, CsvLog, EVAL_SUMMARY_HEADER, SUMMARY_HEADER};
use crossfuse::harness::{
    bench_scan, evaluate_checkpoint, kernel_slopes, metrics_from_dir, parse_seeds, random_policy_eval, run_gradcheck, train, BenchConfig,
    Component, CountingAlloc, RunConfig, Variant,
};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "crossfuse", version, about = "Train and evaluate cross-modal fusion policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one policy per seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the random-action baseline).
    Eval(EvalArgs),
    /// Token-count scaling of the SSM layer against attention.
    Bench(BenchArgs),
    /// Finite-difference checks of every backward rule.
    Gradcheck(GradArgs),
    /// Recompute run analytics from logged CSVs.
    Stats(StatsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration, laid over the selected preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full-size preset.
    #[arg(long, conflicts_with = "desk")]
    paper_config: bool,
    /// Small preset that trains on one core (the default).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Seed list: `0,1,2` or `0..3`.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let base = if self.paper_config { RunConfig::paper() } else { RunConfig::desk() };
        let mut cfg = match &self.config {
            Some(p) => base.overlay_file(p)?,
            None => base,
        };
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(v);
        }
        if let Some(s) = self.scenario {
            cfg.env.scenario = s;
        }
        if let Some(s) = &self.seed {
            cfg.run.seeds = parse_seeds(s)?;
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        Ok(cfg)
    }

    fn seeds(&self, default: &[u64]) -> Result<Vec<u64>> {
        Ok(match &self.seed {
            Some(s) => parse_seeds(s)?,
            None => default.to_vec(),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Override the iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; without it the random-action baseline runs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Visual token counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    /// ops, modules, pipeline, mutation or all.
    #[arg(long, default_value = "all")]
    component: Component,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    /// A seed directory or a directory of `seed-*` runs.
    dir: PathBuf,
    #[arg(long)]
    stability_window: Option<usize>,
    #[arg(long)]
    early_window: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Stats(a) => cmd_stats(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.common.config()?;
    if let Some(n) = a.iterations {
        cfg.run.iterations = n;
    }
    cfg.validate()?;
    eprintln!("training {} on {} for seeds {:?} into {}", cfg.run.variant, cfg.scenario(), cfg.run.seeds, cfg.run.out.display());
    let runs = train(&cfg)?;
    let mut w = CsvLog::create(&cfg.run.out.join("summary.csv"), &SUMMARY_HEADER)?;
    for r in &runs {
        let f = summary_fields(cfg.run.variant, r.seed, &r.metrics);
        println!("{}", f.join(","));
        w.row(&f)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = a.common.config()?;
    let runs = a.runs.unwrap_or(cfg.run.eval_runs);
    let episodes = a.episodes.unwrap_or(cfg.run.eval_episodes);
    let seeds = a.common.seeds(&[0])?;
    let out = a.common.out.as_deref();
    let summary = match &a.checkpoint {
        Some(p) => {
            let rep = evaluate_checkpoint(p, a.common.scenario, a.common.variant, runs, episodes, &seeds, out)?;
            eprintln!("{} on {}", rep.variant, rep.scenario);
            rep.summary
        }
        None => {
            let scenario = cfg.scenario();
            let mut all = Vec::new();
            for &s in &seeds {
                all.extend(random_policy_eval(&cfg, scenario, cfg.run.eval_density, runs, episodes, s)?);
            }
            let s = summarize_eval(0, scenario, &all);
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
                CsvLog::create(&dir.join(format!("eval-random-{}.csv", scenario.name())), &EVAL_SUMMARY_HEADER)?.row(&summary_row(&s))?;
            }
            eprintln!("random actions on {scenario}");
            s
        }
    };
    println!("{}", EVAL_SUMMARY_HEADER.join(","));
    println!("{}", summary_row(&summary).join(","));
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let mut cfg = BenchConfig::default();
    if let Some(g) = a.grid {
        cfg.grid = g;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(s) = a.common.seeds(&[])?.first() {
        cfg.seed = *s;
    }
    let rows = bench_scan(&cfg)?;
    println!("kernel,tokens,p50_ns,peak_bytes");
    for r in &rows {
        println!("{},{},{:.0},{}", r.kernel, r.tokens, r.p50_ns, r.peak_bytes);
    }
    for s in kernel_slopes(&rows) {
        println!("slope {:<10} time {:.2} memory {} scores {}", s.kernel, s.time, fmt_opt(s.memory), fmt_opt(s.score_memory));
    }
    if !counting_active() {
        eprintln!("warning: allocator not instrumented, memory columns are zero");
    }
    if let Some(dir) = &a.common.out {
        write_bench(dir, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradArgs) -> Result<ExitCode> {
    let seeds = a.common.seeds(&[0, 1, 2])?;
    let rep = run_gradcheck(a.component, &seeds)?;
    print!("{}", rep.render());
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir)?;
        let mut w = CsvLog::create(&dir.join("gradcheck.csv"), &["group", "name", "max_rel_err", "max_abs_err", "checked", "tol", "passed"])?;
        for r in &rep.rows {
            w.row(&[
                r.group.clone(),
                r.name.clone(),
                r.max_rel_err.to_string(),
                r.max_abs_err.to_string(),
                r.checked.to_string(),
                r.tol.to_string(),
                r.passed.to_string(),
            ])?;
        }
    }
    Ok(if rep.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn seed_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("config.toml").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.toml").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no runs under {}", dir.display());
    }
    Ok(dirs)
}

fn cmd_stats(a: StatsArgs) -> Result<ExitCode> {
    println!("{}", SUMMARY_HEADER.join(","));
    let mut rows = Vec::new();
    let (mut finals, mut dists) = (Vec::new(), Vec::new());
    for d in seed_dirs(&a.dir)? {
        let cfg = RunConfig::load(&d.join("config.toml"))?;
        let sw = a.stability_window.unwrap_or(cfg.run.stability_window);
        let ew = a.early_window.unwrap_or(cfg.run.early_window);
        let m = metrics_from_dir(&d, sw, ew)?;
        let seed = cfg.run.seeds.first().copied().unwrap_or_default();
        let f = summary_fields(cfg.run.variant, seed, &m);
        println!("{}", f.join(","));
        finals.extend(m.efficiency.map(|e| e.final_reward));
        dists.extend(m.final_eval().map(|e| e.distance.0));
        rows.push(f);
    }
    if rows.len() > 1 {
        let agg = |xs: &[f64]| match xs {
            [] => "NA".to_string(),
            _ => {
                let (m, s) = mean_std(xs);
                format!("{m:.2} ± {s:.2}")
            }
        };
        println!("# {} runs: final reward {}, eval distance {}", rows.len(), agg(&finals), agg(&dists));
    }
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir)?;
        let mut w = CsvLog::create(&dir.join("stats.csv"), &SUMMARY_HEADER)?;
        for r in &rows {
            w.row(r)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
