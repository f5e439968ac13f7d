//! Argument handling and subcommands of the `orbitfl` binary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use orbitfl_core::orbital::{cluster_visibility, write_patterns_csv, VisibilityPattern};
use orbitfl_core::scenario::{preset, Mode, ScenarioFile, PRESET_NAMES};
use orbitfl_core::sim::{self, MetricsLog, World};
use orbitfl_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "orbitfl", version, about = "Federated learning over LEO satellite clusters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full simulation with training
    Simulate(RunArgs),
    /// Compute the update schedule without training
    Schedule(RunArgs),
    /// Export rise/set intervals of every satellite and cluster
    Visibility(RunArgs),
    /// Run several schemes on the same data and report time to target accuracy
    Compare(CompareArgs),
    /// Write the builtin scenario files
    Presets {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub slots: Option<u32>,
    /// `scheduled` or `fixed:<epochs>`
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub horizon_s: Option<f64>,
    /// Require the whole uplink to fit inside one pass
    #[arg(long)]
    pub strict_gu: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file, or the name of a builtin preset
    pub scenario: String,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Scenario files or preset names
    #[arg(required = true)]
    pub scenarios: Vec<String>,
    /// Modes to run for each scenario
    #[arg(long, value_delimiter = ',', default_value = "scheduled,fixed:2,fixed:10")]
    pub modes: Vec<String>,
    /// Accuracy targets for the time-to-target table
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6")]
    pub targets: Vec<f64>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) | Error::HorizonExhausted { .. } | Error::Scheduling(_) => 2,
        Error::DeadlineViolation { .. } => 3,
        _ => 1,
    }
}

/// Scenario from a path, `<name>.toml`, or a preset name.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioFile> {
    let path = Path::new(arg);
    if path.is_file() {
        return ScenarioFile::load(path);
    }
    let with_ext = PathBuf::from(format!("{arg}.toml"));
    if with_ext.is_file() {
        return ScenarioFile::load(&with_ext);
    }
    preset(arg).ok_or_else(|| {
        Error::Config(format!(
            "`{arg}` is neither a scenario file nor a preset ({})",
            PRESET_NAMES.join(", ")
        ))
    })
}

fn apply(mut sc: ScenarioFile, o: &Overrides) -> Result<ScenarioFile> {
    if let Some(s) = o.seed {
        sc.simulation.seed = s;
    }
    if let Some(n) = o.slots {
        sc.simulation.slots = n;
    }
    if let Some(m) = &o.mode {
        sc.simulation.mode = m.parse()?;
    }
    if let Some(h) = o.horizon_s {
        sc.simulation.horizon_s = h;
    }
    if o.strict_gu {
        sc.simulation.strict_gu = true;
    }
    sc.validate()?;
    Ok(sc)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let sc = apply(resolve_scenario(&a.scenario)?, &a.overrides)?;
            let log = sim::run(&sc)?;
            sim::write_metrics_csv(create(&a.out_dir, "metrics.csv")?, &log)?;
            sim::write_events_jsonl(create(&a.out_dir, "events.jsonl")?, &log)?;
            sim::write_schedule_json(create(&a.out_dir, "schedule.json")?, &log)?;
            report(&log);
        }
        Command::Schedule(a) => {
            let sc = apply(resolve_scenario(&a.scenario)?, &a.overrides)?;
            let world = World::build(&sc)?;
            let log = sim::run_world(&sc, &world, None)?;
            sim::write_schedule_json(create(&a.out_dir, "schedule.json")?, &log)?;
            for r in &log.rows {
                println!("slot {:>3}  t_n = {:>12.3} s  I = {:?}", r.slot, r.t_n_s, r.epochs);
            }
        }
        Command::Visibility(a) => {
            let sc = apply(resolve_scenario(&a.scenario)?, &a.overrides)?;
            let config = sc.constellation();
            let gs = sc.ground_station()?;
            let query = sc.query();
            let clusters = (1..=config.orbit_count())
                .map(|p| cluster_visibility(&config, p, &gs, &query))
                .collect::<Result<Vec<_>>>()?;
            let mut pats: Vec<&VisibilityPattern> = Vec::new();
            for c in &clusters {
                pats.extend(c.members.iter());
                pats.push(&c.pattern);
            }
            write_patterns_csv(create(&a.out_dir, "visibility.csv")?, &pats)?;
        }
        Command::Compare(a) => compare(a)?,
        Command::Presets { out_dir } => {
            for name in PRESET_NAMES {
                let sc = preset(name).expect("builtin preset");
                fs::create_dir_all(&out_dir)?;
                fs::write(out_dir.join(format!("{name}.toml")), sc.to_toml())?;
            }
        }
    }
    Ok(())
}

fn report(log: &MetricsLog) {
    for r in &log.rows {
        println!(
            "slot {:>3}  t_n = {:>12.3} s  acc = {:.4}  loss = {:.4}  I = {:?}",
            r.slot, r.t_n_s, r.accuracy, r.loss, r.epochs
        );
    }
    if let Some(t) = &log.truncated {
        println!("truncated: {t}");
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let modes = a.modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for name in &a.scenarios {
        let base = apply(resolve_scenario(name)?, &a.overrides)?;
        for &m in &modes {
            let mut sc = base.clone();
            sc.simulation.mode = m;
            let label = if a.scenarios.len() > 1 { format!("{name}/{m}") } else { m.to_string() };
            runs.push((label, sc));
        }
    }
    let results = sim::compare(&runs)?;

    let mut w = csv::Writer::from_writer(create(&a.out_dir, "compare.csv")?);
    w.write_record(["scheme", "slot", "t_n_s", "accuracy", "loss"]).map_err(csv_err)?;
    for (label, log) in &results {
        for r in &log.rows {
            w.write_record([
                label.as_str(),
                &r.slot.to_string(),
                &format!("{:.3}", r.t_n_s),
                &format!("{:.6}", r.accuracy),
                &format!("{:.6}", r.loss),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut t = csv::Writer::from_writer(create(&a.out_dir, "targets.csv")?);
    t.write_record(["scheme", "target", "t_s"]).map_err(csv_err)?;
    print!("{:<24}", "scheme");
    for target in &a.targets {
        print!("{:>14}", format!("acc>={target}"));
    }
    println!();
    for (label, log) in &results {
        print!("{label:<24}");
        for &target in &a.targets {
            let hit = log.time_to_target(target);
            let cell = hit.map(|s| format!("{:.3}", s)).unwrap_or_default();
            t.write_record([label.as_str(), &target.to_string(), &cell]).map_err(csv_err)?;
            print!("{:>14}", hit.map(|s| format!("{:.2} h", s / 3600.0)).unwrap_or_else(|| "-".into()));
        }
        println!();
    }
    t.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}
