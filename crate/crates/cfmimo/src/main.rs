//! Command-line front end: `run` for ad-hoc experiments, `reproduce` for the
//! bundled figure presets, `selftest` for desk-scale end-to-end checks.

use anyhow::{bail, Context, Result};
use cfmimo::evaluation::empirical_cdf;
use cfmimo::harness::{
    emit_plot_data, resolve_workers, run, write_outputs, write_records_csv, ExperimentSpec,
    FigureKind, PlotData, RunOptions, RunOutput, SpecPatch,
};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cfmimo",
    version,
    about = "Monte Carlo comparison of receive-combining schemes for uplink \
             cell-free massive MIMO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a flat TOML config and/or flags.
    Run(RunArgs),
    /// Re-run a bundled figure experiment and emit plot-ready CSV.
    Reproduce(ReproduceArgs),
    /// Desk-scale end-to-end checks: row shape, scheme pairing, determinism.
    Selftest(SelftestArgs),
}

/// Budget and execution overrides shared by `run` and `reproduce`.
#[derive(Args)]
struct BudgetArgs {
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent network deployments.
    #[arg(long)]
    drops: Option<usize>,
    /// Evaluation trials per drop.
    #[arg(long)]
    trials: Option<usize>,
    /// Monte Carlo samples per AP for serial-statistics training.
    #[arg(long)]
    training_samples: Option<usize>,
    /// Worker threads (default: CFMIMO_THREADS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl BudgetArgs {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(drops) = self.drops {
            spec.drops = drops;
        }
        if let Some(trials) = self.trials {
            spec.trials_per_drop = trials;
        }
        if let Some(t) = self.training_samples {
            spec.training_samples = t;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    budget: BudgetArgs,
    /// Flat TOML config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path; the metadata sidecar lands next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scheme to include (repeatable): cent_tmmse, cent_mmse, uni_tmmse,
    /// stat_tmmse, local_mmse.
    #[arg(long = "scheme")]
    schemes: Vec<String>,
    /// Sweep expression, e.g. `num_aps=20,40,60`.
    #[arg(long)]
    sweep: Option<String>,
    /// AP order for the serial combiner: true/false/index/sorted/both.
    #[arg(long)]
    sorted_aps: Option<String>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Which figure: fig1, fig2, fig3, or fig4.
    figure: String,
    /// Output directory for `<fig>.csv`, `<fig>.meta.json`, `<fig>_plot.csv`.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args)]
struct SelftestArgs {
    /// Worker threads for the check runs.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Reproduce(args) => cmd_reproduce(args),
        Command::Selftest(args) => cmd_selftest(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut spec = ExperimentSpec::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        SpecPatch::from_toml(&text)?.apply(&mut spec)?;
    }
    let cli_patch = SpecPatch {
        out: args.out.clone(),
        schemes: (!args.schemes.is_empty()).then(|| args.schemes.clone()),
        sorted_aps: args.sorted_aps.as_deref().map(str::parse).transpose()?,
        sweep: args.sweep.clone(),
        ..SpecPatch::default()
    };
    cli_patch.apply(&mut spec)?;
    args.budget.apply(&mut spec);

    let output = execute(&spec, args.budget.workers)?;
    let (csv_path, sidecar) = write_outputs(&spec, &output)?;
    println!("wrote {} and {}", csv_path.display(), sidecar.display());
    print_series_means(&output);
    Ok(())
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<()> {
    let figure: FigureKind = args.figure.parse()?;
    let mut spec = figure.preset();
    args.budget.apply(&mut spec);
    spec.output_path = args.out_dir.join(format!("{figure}.csv"));

    let output = execute(&spec, args.budget.workers)?;
    let (csv_path, sidecar) = write_outputs(&spec, &output)?;
    println!("wrote {} and {}", csv_path.display(), sidecar.display());

    let plot = emit_plot_data(&output.records, figure)?;
    let plot_path = args.out_dir.join(format!("{figure}_plot.csv"));
    let mut bytes = Vec::new();
    plot.write_csv(&mut bytes)?;
    std::fs::write(&plot_path, bytes)?;
    println!("wrote {}", plot_path.display());

    match &plot {
        PlotData::Sweep(rows) => {
            let parameter = figure.sweep_parameter().expect("sweep figure");
            for row in rows {
                println!(
                    "  {series}: {parameter}={value} mean_se={mean:.4} std_err={err:.4}",
                    series = row.series,
                    value = row.sweep_value,
                    mean = row.mean_se,
                    err = row.std_err,
                );
            }
        }
        PlotData::Cdf(_) => {
            let mut by_series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for record in &output.records {
                by_series.entry(record.series()).or_default().push(record.se);
            }
            for (series, values) in by_series {
                let cdf = empirical_cdf(&values)?;
                println!(
                    "  {series}: median_se={median:.4} mean_se={mean:.4} over {n} rows",
                    median = cdf.median,
                    mean = cdf.mean,
                    n = values.len(),
                );
            }
        }
    }
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<()> {
    let workers = resolve_workers(args.workers)?;
    let spec = ExperimentSpec::smoke();

    let output = run(&spec, &RunOptions { workers })?;
    let expected = spec.schemes.len() * spec.config.num_ues * spec.drops;
    if output.records.len() != expected {
        bail!(
            "smoke run produced {} records, expected {expected}",
            output.records.len()
        );
    }
    if let Some(bad) = output
        .records
        .iter()
        .find(|r| !(r.se.is_finite() && r.mse > 0.0 && r.mse <= 1.0))
    {
        bail!("non-finite result for scheme {} ue {}", bad.scheme, bad.ue);
    }
    println!("selftest: smoke run shape ok ({expected} records)");

    // The two centralized schemes compute the same combiner two ways; they
    // must agree on every paired realization set.
    let mse_of = |output: &RunOutput, label: &str, ue: usize| -> f64 {
        output
            .records
            .iter()
            .find(|r| r.scheme.label() == label && r.ue == ue)
            .expect("scheme present")
            .mse
    };
    for ue in 0..spec.config.num_ues {
        let a = mse_of(&output, "cent_tmmse", ue);
        let b = mse_of(&output, "cent_mmse", ue);
        if (a - b).abs() > 1e-8 * a.abs() {
            bail!("centralized pair disagrees on ue {ue}: {a} vs {b}");
        }
    }
    println!("selftest: centralized pair agrees on shared realizations");

    let digest = spec.digest();
    let serialize = |workers: Option<usize>| -> Result<Vec<u8>> {
        let output = run(&spec, &RunOptions { workers })?;
        let mut bytes = Vec::new();
        write_records_csv(&output.records, &digest, &mut bytes)?;
        Ok(bytes)
    };
    let narrow = serialize(Some(1))?;
    let wide = serialize(Some(4))?;
    if narrow != wide {
        bail!("CSV bytes differ between 1 and 4 workers");
    }
    println!("selftest: CSV bytes identical across worker counts");

    emit_plot_data(&output.records, FigureKind::Fig1Cdf)?;
    println!("selftest: plot aggregation ok");
    println!("selftest: all checks passed");
    Ok(())
}

fn execute(spec: &ExperimentSpec, workers: Option<usize>) -> Result<RunOutput> {
    let workers = resolve_workers(workers)?;
    let output = run(spec, &RunOptions { workers })?;
    println!(
        "{} records in {:.2?} ({} workers)",
        output.records.len(),
        output.wall_time,
        workers.map_or("default".to_string(), |w| w.to_string()),
    );
    Ok(output)
}

fn print_series_means(output: &RunOutput) {
    let mut by_series: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for record in &output.records {
        let slot = by_series.entry(record.series()).or_insert((0.0, 0));
        slot.0 += record.se;
        slot.1 += 1;
    }
    for (series, (sum, n)) in by_series {
        println!("  {series}: mean_se={:.4} over {n} rows", sum / n as f64);
    }
}
