use std::fs::File;
use std::io::{stdout, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dergrid::runlog::{self, Certificate};
use dergrid::scenario::{self, ScenarioFile};
use dergrid::tools::{self, ModelJson};
use dergrid::{Error, Result};
use dergrid_core::sim;

#[derive(Parser)]
#[command(name = "dergrid", version, about = "Closed-loop simulator for feedback-based DER control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write runlog.jsonl and summary.csv
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a logged run against its tracking bound
    Certify {
        #[arg(long)]
        log: PathBuf,
        /// Per-step CSV destination; stdout if omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the scenario's grid for injections given as CSV
    Powerflow {
        #[arg(long)]
        scenario: PathBuf,
        /// Rows of node,connection,p,q in kW / kvar, generation positive
        #[arg(long)]
        injections: PathBuf,
    },
    /// Dump the controller's affine model as JSON
    Linearize {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(Error::io(p))?),
        None => Box::new(stdout().lock()),
    })
}

fn report(cert: &Certificate) -> bool {
    let m = &cert.measurement;
    let violations = m.within.iter().filter(|&&b| !b).count();
    eprintln!(
        "{}: gap within bound at {}/{} steps; tail mean {:.3e} vs asymptotic bound {:.3e} (c = {:.6})",
        if cert.passed() { "PASS" } else { "FAIL" },
        m.within.len() - violations,
        m.within.len(),
        cert.tail_mean,
        cert.asymptotic,
        cert.c,
    );
    cert.passed()
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { scenario, out } => {
            let sc = scenario::load(&scenario)?;
            let log = sim::run(&sc)?;
            let h = &log.header;
            eprintln!("alpha = {:.4e}, L = {:.4}, G = {:.4}, c = {:.6}", h.alpha, h.l, h.g, h.c);
            runlog::write_run(&log, sc.params.i_max.as_slice(), &out)?;
            eprintln!("{} of {} steps written to {}", log.records.len(), sc.sim.steps, out.display());
            if let Some(reason) = &log.aborted {
                eprintln!("run aborted at {reason}");
                return Ok(false);
            }
            if sc.sim.reference.is_some() {
                return Ok(report(&runlog::certify(&log)?));
            }
            Ok(true)
        }
        Command::Certify { log, out } => {
            let run = runlog::read_jsonl_path(&log)?;
            let cert = runlog::certify(&run)?;
            cert.write_csv(output(&out)?)?;
            Ok(report(&cert) && run.completed())
        }
        Command::Powerflow { scenario, injections } => {
            let (file, _) = ScenarioFile::from_path(&scenario)?;
            let grid = file.grid()?;
            let inj = tools::read_injections(File::open(&injections).map_err(Error::io(&injections))?)?;
            tools::powerflow_csv(&grid, &inj, stdout().lock())?;
            Ok(true)
        }
        Command::Linearize { scenario, out } => {
            let sc = scenario::load(&scenario)?;
            let model = sim::initial_model(&sc)?;
            let mut w = output(&out)?;
            serde_json::to_writer_pretty(&mut w, &ModelJson::from_model(&model))
                .map_err(|source| Error::Json { path: out.unwrap_or_else(|| "<stdout>".into()), source })?;
            writeln!(w).map_err(Error::io("<stdout>"))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
