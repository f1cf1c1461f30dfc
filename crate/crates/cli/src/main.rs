use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use simcal::calibration::CalibrationTrace;
use simcal::reporting::{
    calibrate_seed, drift_run, heatmap_bundle, robustness_sweep, stage_curve, write_events_csv, write_indicator_csv,
    write_stage_curve_csv, write_sweep_rows_csv, write_sweep_summary_csv, TraceMetadata,
};
use simcal::scenario::{bundled, ScenarioFile};
use simcal::selfcheck::run_all;
use simcal::SimError;

#[derive(Parser)]
#[command(name = "simcal", version, about = "Stacked metasurface simulation and interlayer calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-stage gradient calibration of one error draw.
    Calibrate(Common),
    /// Single-stage robustness sweep over an error bound.
    Sweep(Common),
    /// Magnitude heatmaps of one interlayer matrix before and after calibration.
    Heatmap(Common),
    /// State-driven monitoring with a scripted error jump.
    Monitor(Common),
    /// Gradient, oracle, zero-error and schema self-checks.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file, or the name of a bundled scenario.
    #[arg(long, default_value = "desk-tiny")]
    scenario: String,
    /// Output directory; defaults to the scenario's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; takes precedence over the file and any override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// `key.path=value`, applied in order on top of the file.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
}

/// Failure with its exit code and machine-readable fields.
struct Failure {
    code: u8,
    kind: &'static str,
    field: Option<String>,
    message: String,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let message = e.to_string();
        match e {
            SimError::Config { field, reason } => Failure {
                code: 2,
                kind: "schema",
                field: Some(field),
                message: reason,
            },
            SimError::Parse(_) => Failure {
                code: 2,
                kind: "schema",
                field: None,
                message,
            },
            SimError::Diverged { .. } | SimError::Singularity { .. } | SimError::ZeroReference => Failure {
                code: 3,
                kind: "numerical",
                field: None,
                message,
            },
            SimError::Io(_) => Failure {
                code: 1,
                kind: "io",
                field: None,
                message,
            },
            _ => Failure {
                code: 1,
                kind: "internal",
                field: None,
                message,
            },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        SimError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate(c) => load(c).and_then(|(s, out)| calibrate(&s, &out)),
        Command::Sweep(c) => load(c).and_then(|(s, out)| sweep(&s, &out, c.workers)),
        Command::Heatmap(c) => load(c).and_then(|(s, out)| heatmap(&s, &out)),
        Command::Monitor(c) => load(c).and_then(|(s, out)| monitor(&s, &out)),
        Command::Validate(c) => load(c).and_then(|(s, _)| validate(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = json!({"error": f.kind, "code": f.code, "field": f.field, "message": f.message});
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}

fn load(c: &Common) -> Result<(ScenarioFile, PathBuf), Failure> {
    let text = if Path::new(&c.scenario).is_file() {
        fs::read_to_string(&c.scenario)?
    } else if let Some(s) = bundled(&c.scenario) {
        s.to_json()
    } else {
        return Err(Failure {
            code: 2,
            kind: "schema",
            field: Some("--scenario".into()),
            message: format!("`{}` is neither a readable file nor a bundled scenario", c.scenario),
        });
    };
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let scenario = ScenarioFile::from_json_with_overrides(&text, &overrides)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&scenario.output_dir));
    Ok((scenario, out))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Outcome {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| SimError::Io(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn log_stages(trace: &CalibrationTrace) {
    let idx = trace.interlayer_indices();
    for s in &trace.stages {
        let mean = idx.iter().map(|&i| s.nmse_db[i]).sum::<f64>() / idx.len() as f64;
        eprintln!(
            "stage {:>2}  mean interlayer NMSE {mean:8.2} dB  loss {:.3e}{}",
            s.stage,
            s.loss_final,
            if s.diverged { "  DIVERGED" } else { "" }
        );
    }
}

fn write_trace(trace: &CalibrationTrace, scenario: &ScenarioFile, out: &Path) -> Outcome {
    let mut f = create(out, "trace.csv")?;
    write_stage_curve_csv(&stage_curve(trace, scenario.seed), &mut f)?;
    f.flush()?;
    write_json(out, "trace.json", &TraceMetadata::new(trace, scenario, scenario.seed))
}

fn diverged(trace: &CalibrationTrace) -> Outcome {
    match trace.first_divergence() {
        Some(s) => Err(Failure {
            code: 3,
            kind: "numerical",
            field: Some(format!("stage.{}", s.stage)),
            message: format!(
                "optimizer diverged at step size {:e}; artifacts up to this point were written",
                s.step_size
            ),
        }),
        None => Ok(()),
    }
}

fn calibrate(scenario: &ScenarioFile, out: &Path) -> Outcome {
    let (trace, _, _) = calibrate_seed(scenario, scenario.seed, |_| {})?;
    log_stages(&trace);
    write_trace(&trace, scenario, out)?;
    diverged(&trace)
}

fn sweep(scenario: &ScenarioFile, out: &Path, workers: Option<usize>) -> Outcome {
    let spec = scenario
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::from(SimError::Config { field: "sweep".into(), reason: "scenario has no sweep section".into() }))?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let table = robustness_sweep(spec, scenario, scenario.seed, workers)?;
    for p in &table.points {
        eprintln!(
            "{} = {:.4e}  uncalibrated {:8.2} dB  calibrated {:8.2} dB",
            table.parameter.name(),
            p.bound,
            p.mean_uncalibrated_db,
            p.mean_calibrated_db
        );
    }
    let mut f = create(out, "sweep.csv")?;
    write_sweep_rows_csv(&table, &mut f)?;
    f.flush()?;
    let mut f = create(out, "sweep_summary.csv")?;
    write_sweep_summary_csv(&table, &mut f)?;
    f.flush()?;
    Ok(())
}

fn heatmap(scenario: &ScenarioFile, out: &Path) -> Outcome {
    let (trace, ideal, practical) = calibrate_seed(scenario, scenario.seed, |_| {})?;
    log_stages(&trace);
    write_trace(&trace, scenario, out)?;
    diverged(&trace)?;
    let which = scenario.heatmap.as_ref().and_then(|h| h.matrix);
    let bundle = heatmap_bundle(&ideal, &practical, &trace.estimate, which)?;
    for (name, panel) in bundle.panels() {
        let mut f = create(out, &format!("heatmap_{name}.txt"))?;
        f.write_all(panel.to_text().as_bytes())?;
        f.flush()?;
    }
    eprintln!(
        "heatmap {}  residual ratio {:.3}  magnitude residual ratio {:.3}",
        bundle.matrix_name,
        bundle.residual_ratio(),
        bundle.magnitude_residual_ratio()
    );
    write_json(
        out,
        "heatmap.json",
        &json!({
            "scenario": scenario.name,
            "scenario_hash": scenario.hash(),
            "master_seed": scenario.seed,
            "matrix_index": bundle.matrix_index,
            "matrix_name": bundle.matrix_name,
            "residual_ratio": bundle.residual_ratio(),
            "magnitude_residual_ratio": bundle.magnitude_residual_ratio(),
            "panels": bundle.panels().iter().map(|(n, _)| format!("heatmap_{n}.txt")).collect::<Vec<_>>(),
        }),
    )
}

fn monitor(scenario: &ScenarioFile, out: &Path) -> Outcome {
    let run = drift_run(scenario, scenario.seed)?;
    log_stages(&run.trace);
    write_trace(&run.trace, scenario, out)?;
    let mut f = create(out, "events.csv")?;
    write_events_csv(&run.log, &mut f)?;
    f.flush()?;
    let mut f = create(out, "indicator.csv")?;
    write_indicator_csv(&run.log, run.settings.data_per_known, &mut f)?;
    f.flush()?;
    eprintln!(
        "monitor  {} known slots  {} trigger(s) at {:?}  change at {:?}",
        run.log.known_slots,
        run.log.events.len(),
        run.log.events.iter().map(|e| e.known_slot).collect::<Vec<_>>(),
        run.change_at
    );
    diverged(&run.trace)
}

fn validate(scenario: &ScenarioFile) -> Outcome {
    let checks = run_all(scenario, scenario.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{} {}  metric {:.3e}  limit {:.1e}  {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.metric,
            c.limit,
            c.detail
        );
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    eprintln!("validate  {}/{} checks pass", checks.len() - failed.len(), checks.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            kind: "check",
            field: Some(failed.join(",")),
            message: "self-check failed".into(),
        })
    }
}
