use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scsyn::bundle::{read_bundle, write_bundle};
use scsyn::config::{preset, Config};
use scsyn::pipeline::{
    deployment_plant, run, timing_table, write_field_csv, Outcome, Overrides, PipelineError,
};
use scsyn::runtime::{simulate, write_trajectories_csv};

#[derive(Parser)]
#[command(name = "scsyn", version, about = "Controller synthesis for stochastic systems against scLTL specifications")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SynthFlags {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compute an upper bound instead of the robust lower bound.
    #[arg(long)]
    upper_bound: bool,
    /// Export only the initial-DFA-state field.
    #[arg(long)]
    initial_only: bool,
    /// Kernel truncation tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Convergence threshold of value iteration.
    #[arg(long)]
    thold: Option<f64>,
    /// Skip the deployment runs listed in the config.
    #[arg(long)]
    no_simulate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a config file.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: SynthFlags,
    },
    /// Closed-loop Monte Carlo runs of a controller bundle.
    Simulate {
        #[arg(long)]
        controller: PathBuf,
        /// Initial state as comma-separated values; repeat for several.
        #[arg(long, required = true, allow_hyphen_values = true, value_parser = parse_point)]
        x0: Vec<Point>,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// End-to-end run of a built-in preset with a timing table.
    Bench {
        /// carpark, package-delivery, vdpol or bas.
        preset: String,
        #[command(flatten)]
        flags: SynthFlags,
    },
}

#[derive(Clone, Debug)]
struct Point(Vec<f64>);

fn parse_point(s: &str) -> Result<Point, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}"))).collect::<Result<_, _>>().map(Point)
}

fn overrides(f: &SynthFlags) -> Overrides {
    Overrides {
        upper_bound: f.upper_bound,
        initial_only: f.initial_only,
        tol: f.tol,
        thold: f.thold,
        seed: f.seed,
        skip_simulation: f.no_simulate,
    }
}

fn write_outputs(out: &Path, o: &Outcome) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out)?;
    write_bundle(BufWriter::new(File::create(out.join("controller.json"))?), &o.config, &o.controller)?;
    write_field_csv(
        File::create(out.join("satisfaction.csv"))?,
        &o.controller,
        &o.values,
        o.config.synthesis.initial_only,
    )?;
    let report = serde_json::to_string_pretty(&o.report).expect("report serializes");
    std::fs::write(out.join("report.json"), report)?;
    Ok(())
}

fn synthesize(cfg: Config, flags: &SynthFlags, bench: bool) -> Result<(), PipelineError> {
    let o = run(&cfg, &overrides(flags))?;
    write_outputs(&flags.out, &o)?;
    let r = &o.report;
    println!("{}: DFA {} states, grid {:?}, {} modes", r.name, r.dfa_states, r.grid_cells, r.modes);
    println!(
        "relation: eps {} delta {:.4e} lambda {:.4} output radius {:.4}",
        r.relation.epsilon, r.relation.delta_max, r.relation.lambda_max, r.relation.output_radius
    );
    if let Some(m) = &r.reduction {
        println!(
            "reduced model: order {}, eps1 {} delta1 {:.4e}, eps2 {} delta2 {:.4e}",
            m.dimr, m.epsilon_1, m.delta_1, m.epsilon_2, m.delta_2
        );
    }
    println!("value iteration: {} sweeps, peak {:.4}", r.iterations, r.peak_value);
    for iv in &r.initial_values {
        println!("V({:?}) = {:.4}", iv.x0, iv.value);
    }
    for d in &r.deployment {
        println!(
            "x0 {:?}: empirical {:.4} [{:.4}, {:.4}] over {} runs, bound {:.4}",
            d.x0, d.satisfaction, d.wilson.0, d.wilson.1, d.runs, d.bound
        );
    }
    if bench {
        print!("{}", timing_table(&r.timings));
        if let Some(mb) = r.peak_memory_mb {
            println!("peak memory {mb:.1} MB");
        }
    }
    Ok(())
}

fn simulate_cmd(path: &Path, x0: &[Point], steps: usize, runs: usize, seed: u64, out: &Path) -> Result<(), PipelineError> {
    let (cfg, c) = read_bundle(File::open(path)?)?;
    let (plant, shift) = deployment_plant(&cfg)?;
    let n = c.c.ncols();
    if let Some(p) = x0.iter().find(|p| p.0.len() != n) {
        return Err(PipelineError::Config(scsyn::config::ConfigError::Invalid(format!(
            "x0 {:?} needs {n} values",
            p.0
        ))));
    }
    std::fs::create_dir_all(out)?;
    let mut summary = Vec::new();
    for (i, Point(x)) in x0.iter().enumerate() {
        let local: Vec<f64> = match &shift {
            Some(s) => x.iter().zip(s.x_ss.iter()).map(|(a, b)| a - b).collect(),
            None => x.to_vec(),
        };
        let r = simulate(&c, &plant, &local, steps, runs, seed, runs > 0);
        if runs > 0 {
            let f = BufWriter::new(File::create(out.join(format!("trajectories_{i}.csv")))?);
            write_trajectories_csv(f, &r.trajectories, shift.as_ref())?;
        }
        summary.push(serde_json::json!({
            "x0": x,
            "robust_bound": c.value_at(&local),
            "runs": r.runs,
            "successes": r.successes,
            "satisfaction": r.satisfaction,
            "wilson": [r.wilson.0, r.wilson.1],
            "breaches": r.breaches,
            "input_violations": r.input_violations,
        }));
        println!("x0 {x:?}: {}/{} satisfied", r.successes, r.runs);
    }
    let doc = serde_json::json!({ "steps": steps, "seed": seed, "results": summary });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc).expect("summary serializes"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: {e}");
        }
    }
    let result = match &cli.command {
        Command::Synthesize { config, flags } => Config::load(config).map_err(PipelineError::from).and_then(|c| synthesize(c, flags, false)),
        Command::Bench { preset: name, flags } => preset(name).map_err(PipelineError::from).and_then(|c| synthesize(c, flags, true)),
        Command::Simulate { controller, x0, steps, runs, seed, out } => simulate_cmd(controller, x0, *steps, *runs, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
