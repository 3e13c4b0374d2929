use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use serde::Serialize;

use lpvds::demonstrations::{DataFormat, Equilibrium};
use lpvds::pipeline::{learn, verify_model, write_outputs, ModelFile, PipelineConfig, MODEL_FILE, SUMMARY_FILE};
use lpvds::simulator::{export_plot_data, mse, rollout, RolloutOptions, Termination};
use lpvds::{DemonstrationSet, Error, Rollout};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_COMPOSITION: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "lpvds", version, about = "Learn certified stable LPV dynamical systems from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a composed model; writes model.json and summary.json.
    Learn {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-check every certificate of a learned model.
    Verify {
        model: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Roll the model out from demonstration starts or a given state.
    Simulate {
        model: PathBuf,
        /// `demo-starts` or a comma-separated state in original coordinates.
        #[arg(long, default_value = "demo-starts")]
        from: String,
        #[arg(long, default_value_t = 50.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        /// Converged once `|x| <= stop_tol * |x0|`.
        #[arg(long, default_value_t = 1e-3)]
        stop_tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write demonstrations and rollouts from their starts as plot CSV.
    ExportPlot {
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long, default_value_t = 50.0)]
        t_max: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Learn { config } => cmd_learn(&config),
        Command::Verify {
            model,
            samples,
            seed,
            tol,
            json,
        } => cmd_verify(&model, samples, seed, tol, json),
        Command::Simulate {
            model,
            from,
            t_max,
            dt,
            stop_tol,
            out,
        } => {
            let opts = RolloutOptions {
                dt,
                t_max,
                stop_tol,
                ..Default::default()
            };
            cmd_simulate(&model, &from, &opts, &out)
        }
        Command::ExportPlot {
            model,
            data,
            out,
            dt,
            t_max,
        } => {
            let opts = RolloutOptions {
                dt,
                t_max,
                ..Default::default()
            };
            cmd_export_plot(&model, &data, &opts, &out)
        }
    };
    ExitCode::from(code)
}

fn fail(e: &Error) -> u8 {
    error!("{e}");
    eprintln!("error: {e}");
    EXIT_ERROR
}

fn cmd_learn(config: &Path) -> u8 {
    let (cfg, base) = match PipelineConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let out_dir = match cfg.validate(&base) {
        Ok(p) => p.output_dir,
        Err(e) => return fail(&e),
    };
    let outcome = match learn(&cfg, &base) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_outputs(&outcome, &out_dir) {
        return fail(&e);
    }
    let s = &outcome.summary;
    for sub in &s.subsystems {
        println!(
            "subsystem {}: K={} objective={:.4e} outer={} pullback={} time={:.2}s",
            sub.index, sub.k, sub.objective, sub.outer_iterations, sub.pullback_steps, sub.seconds
        );
    }
    println!("mu = {:?}", s.mu);
    println!("certificate max eigenvalue = {:.3e}", s.certificate_eig);
    println!("training mse = {:.4e}", s.training_mse);
    println!(
        "time: load {:.2}s, subsystems {:.2}s, composition {:.2}s, total {:.2}s",
        s.timings.load_seconds, s.timings.subsystem_seconds, s.timings.composition_seconds, s.timings.total_seconds
    );
    println!("wrote {} and {}", out_dir.join(MODEL_FILE).display(), out_dir.join(SUMMARY_FILE).display());
    match &outcome.composition_error {
        None => EXIT_OK,
        Some(e) => {
            eprintln!("warning: {e}; model written without a certificate");
            if let Error::CompositionInfeasible { witness, .. } = e {
                eprintln!("witness direction: {witness:?}");
            }
            EXIT_COMPOSITION
        }
    }
}

fn cmd_verify(model: &Path, samples: usize, seed: u64, tol: f64, json: bool) -> u8 {
    let file = match ModelFile::load(model) {
        Ok(f) => f,
        Err(e) => return fail(&e),
    };
    let rep = match verify_model(&file, samples, seed, tol) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
    } else {
        for c in &rep.checks {
            println!(
                "{} {} worst={:.3e} tol={:.1e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.worst_margin,
                c.tolerance
            );
        }
    }
    if !file.model.certified {
        eprintln!("model was written without a composition certificate");
    }
    if rep.passed() && file.model.certified {
        EXIT_OK
    } else {
        for c in rep.failures() {
            eprintln!("failed check: {} (witness {:?})", c.name, c.witness);
        }
        EXIT_VERIFY
    }
}

#[derive(Serialize)]
struct RolloutSummary {
    start: Vec<f64>,
    terminated: Termination,
    final_time: f64,
    final_norm: f64,
}

#[derive(Serialize)]
struct SimulateSummary {
    training_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_mse: Option<f64>,
    rollouts: Vec<RolloutSummary>,
}

fn parse_state(s: &str, n: usize) -> Result<Vec<f64>, Error> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("bad start state {s:?}: {e}")))?;
    if v.len() != n {
        return Err(Error::DimensionMismatch(format!("start state has {} entries, model has {n}", v.len())));
    }
    Ok(v)
}

fn run_rollouts(file: &ModelFile, starts: &[Vec<f64>], opts: &RolloutOptions) -> Result<Vec<Rollout>, Error> {
    starts
        .iter()
        .map(|x0| rollout(&file.model, &file.to_model_coords(x0), opts))
        .collect()
}

fn write_results(
    file: &ModelFile,
    demos: Option<&DemonstrationSet>,
    starts: &[Vec<f64>],
    rollouts: &[Rollout],
    data_mse: Option<f64>,
    out: &Path,
) -> Result<u8, Error> {
    std::fs::create_dir_all(out)?;
    let plot = std::fs::File::create(out.join("plot.csv"))?;
    export_plot_data(&file.model, demos, rollouts, &file.equilibrium, std::io::BufWriter::new(plot))?;
    let summary = SimulateSummary {
        training_mse: file.training_mse,
        data_mse,
        rollouts: starts
            .iter()
            .zip(rollouts)
            .map(|(s, r)| RolloutSummary {
                start: s.clone(),
                terminated: r.terminated,
                final_time: *r.times.last().expect("non-empty"),
                final_norm: r.final_state().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
            .collect(),
    };
    std::fs::write(out.join("rollouts.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut code = EXIT_OK;
    for r in &summary.rollouts {
        println!("{:?} from {:?}: t={:.3} |x|={:.3e}", r.terminated, r.start, r.final_time, r.final_norm);
        if r.terminated == Termination::Diverged {
            eprintln!("rollout diverged from start {:?}", r.start);
            code = EXIT_DIVERGED;
        }
    }
    println!("training mse = {:.4e}", file.training_mse);
    if let Some(m) = data_mse {
        println!("data mse = {m:.4e}");
    }
    Ok(code)
}

fn cmd_simulate(model: &Path, from: &str, opts: &RolloutOptions, out: &Path) -> u8 {
    let run = || -> Result<u8, Error> {
        opts.validate()?;
        let file = ModelFile::load(model)?;
        let starts = if from == "demo-starts" {
            file.demo_starts.clone()
        } else {
            vec![parse_state(from, file.model.n())?]
        };
        let rollouts = run_rollouts(&file, &starts, opts)?;
        write_results(&file, None, &starts, &rollouts, None, out)
    };
    run().unwrap_or_else(|e| fail(&e))
}

fn cmd_export_plot(model: &Path, data: &Path, opts: &RolloutOptions, out: &Path) -> u8 {
    let run = || -> Result<u8, Error> {
        opts.validate()?;
        let file = ModelFile::load(model)?;
        let format = DataFormat::from_path(data)
            .ok_or_else(|| Error::InvalidConfig(format!("cannot tell the format of {}", data.display())))?;
        let raw = DemonstrationSet::load(data, format, file.config.data.dt)?;
        let demos = raw.shift_to_origin(&Equilibrium::Point(file.equilibrium.clone()))?;
        let with_vel = if demos.has_velocities() {
            Some(demos.clone())
        } else {
            demos.estimate_velocities().ok()
        };
        let data_mse = match with_vel {
            Some(d) => {
                let (xs, vs) = d.samples()?;
                Some(mse(&file.model, &xs, &vs)?)
            }
            None => None,
        };
        let starts = raw.starts();
        let rollouts = run_rollouts(&file, &starts, opts)?;
        write_results(&file, Some(&demos), &starts, &rollouts, data_mse, out)
    };
    run().unwrap_or_else(|e| fail(&e))
}
