use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossdiff::error::HarnessError;
use crossdiff::harness::{compare_trajectories, report, run_scenario, RunConfig};

#[derive(Parser)]
#[command(
    name = "crossdiff",
    version,
    about = "Finite-volume runs for degenerate cross-diffusion systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario described by a config file.
    Run(RunArgs),
    /// Run a refinement family (forces `scenario.kind = "refinement"`).
    Refine {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Run a long-time study (forces `scenario.kind = "longtime"`).
    Longtime {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        t_max: Option<f64>,
    },
    /// Space-time errors of a coarse run against a finer reference run.
    Compare { coarse: PathBuf, reference: PathBuf },
    /// Print the manifest of a run directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory (overrides `outputs.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    mobility: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// Generic override, `dotted.key=value` (value parsed as TOML).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut ov = vec![];
        let mut put = |k: &str, v: String| ov.push((k.to_string(), v));
        if let Some(o) = &self.out {
            put("outputs.dir", format!("{:?}", o.display().to_string()));
        }
        if let Some(v) = self.dt {
            put("scheme.dt", format!("{v:e}"));
        }
        if let Some(v) = self.t_final {
            put("scheme.t_final", format!("{v:e}"));
        }
        if let Some(v) = self.cells {
            put("mesh.cells", v.to_string());
        }
        if let Some(v) = &self.mobility {
            put("scheme.mobility", format!("{v:?}"));
        }
        if let Some(v) = self.eta {
            put("scheme.eta", format!("{v:e}"));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            ov.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(ov)
    }
}

fn execute(args: &RunArgs, mut extra: Vec<(String, String)>) -> Result<bool, HarnessError> {
    let mut ov = args
        .overrides()
        .map_err(|m| crossdiff::error::ConfigError::Invalid {
            field: "--set".into(),
            message: m,
        })?;
    ov.append(&mut extra);
    let cfg = RunConfig::load(&args.config, &ov)?;
    let out = run_scenario(&cfg)?;
    let (text, ok) = report(&out.dir)?;
    print!("{text}");
    println!("artifacts in {}", out.dir.display());
    Ok(ok)
}

fn kind_override(kind: &str) -> (String, String) {
    ("scenario.kind".into(), format!("{kind:?}"))
}

fn show(dir: &Path) -> Result<bool, HarnessError> {
    let (text, ok) = report(dir)?;
    print!("{text}");
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run(a) => execute(a, vec![]),
        Cmd::Refine { run, levels } => {
            let mut ex = vec![kind_override("refinement")];
            if let Some(l) = levels {
                ex.push(("scenario.levels".into(), l.to_string()));
            }
            execute(run, ex)
        }
        Cmd::Longtime { run, t_max } => {
            let mut ex = vec![kind_override("longtime")];
            if let Some(t) = t_max {
                ex.push(("scenario.t_max".into(), format!("{t:e}")));
            }
            execute(run, ex)
        }
        Cmd::Compare { coarse, reference } => compare_trajectories(coarse, reference).map(|rows| {
            println!("species,l1_u,l2_u,l1_hat,l2_hat");
            for r in rows {
                println!(
                    "{},{:e},{:e},{:e},{:e}",
                    r.species, r.l1_u, r.l2_u, r.l1_hat, r.l2_hat
                );
            }
            true
        }),
        Cmd::Report { dir } => show(dir),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::StepFailed { .. } => ExitCode::from(3),
                _ => ExitCode::from(4),
            }
        }
    }
}
