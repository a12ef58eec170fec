use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use csi_djscc::evaluation::{eval_pipeline, evaluate_point};
use csi_djscc::experiments::{
    echo_config, generate_data, list_presets, load_model, load_results, preset_text, report, run_experiment,
    sweep_and_report, train_models, ExperimentConfig, Profile, RunPaths,
};
use csi_djscc::phy::SnrDb;
use csi_djscc::pipelines::Variant;
use csi_djscc::{Error, Result};

#[derive(Parser)]
#[command(name = "csi-djscc", version, about = "SNR-adaptive deep joint source-channel coding for CSI feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(clap::Args)]
struct Common {
    /// Config file, or the name of a preset
    #[arg(long)]
    config: String,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify) the dataset
    GenerateData(Common),
    /// Train every model of the experiment
    Train(Common),
    /// Print test NMSE of each trained model at every grid point
    Evaluate(Common),
    /// Sweep trained models and write results.json and the report
    Sweep(Common),
    /// Re-render the report from results.json
    Report(Common),
    /// Data, training, sweep and report in one go
    Run(Common),
    /// List the built-in presets
    Presets,
}

fn load(c: &Common) -> Result<(ExperimentConfig, String)> {
    let raw = match preset_text(&c.config) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(&c.config)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", c.config)))?,
    };
    let mut cfg = ExperimentConfig::from_json(&raw)?;
    if let Some(p) = c.profile {
        cfg.profile = match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        };
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, raw))
}

fn evaluate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let d = generate_data(cfg, paths)?;
    for e in &cfg.models {
        if e.pipeline.variant == Variant::SsccIdeal {
            continue;
        }
        let mut b = load_model(paths, &e.label)?;
        let mut p = eval_pipeline(&mut b, &e.pipeline)?;
        let vals = cfg
            .grid
            .iter()
            .enumerate()
            .map(|(i, &g)| Ok(format!("{:.2}", evaluate_point(&mut p, &d.test, SnrDb::new(g)?, cfg.seed, i as u64, 256)?.db(cfg.nmse_mode))))
            .collect::<Result<Vec<_>>>()?;
        println!("{}: {}", e.label, vals.join(" "));
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    let common = match &cmd {
        Command::Presets => {
            for p in list_presets() {
                println!("{p}");
            }
            return Ok(());
        }
        Command::GenerateData(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Sweep(c)
        | Command::Report(c)
        | Command::Run(c) => c,
    };
    let (cfg, raw) = load(common)?;
    let paths = RunPaths::from_env(&cfg);
    match cmd {
        Command::GenerateData(_) => generate_data(&cfg, &paths).map(|_| ()),
        Command::Train(_) => {
            echo_config(&cfg, Some(&raw), &paths)?;
            let d = generate_data(&cfg, &paths)?;
            train_models(&cfg, &paths, &d).map_err(|e| Error::Stage {
                stage: "train",
                source: Box::new(e),
            })
        }
        Command::Evaluate(_) => evaluate(&cfg, &paths),
        Command::Sweep(_) => {
            let d = generate_data(&cfg, &paths)?;
            sweep_and_report(&cfg, &paths, &d).map(|_| ())
        }
        Command::Report(_) => {
            let results = load_results(&paths)?;
            report(&paths, &results)
        }
        Command::Run(_) => {
            let r = run_experiment(&cfg, Some(&raw), &paths)?;
            println!("{}", paths.run.join("results.json").display());
            for c in &r.curves {
                println!("{:<24} mean {:>8.2} dB", c.label, c.mean_db());
            }
            Ok(())
        }
        Command::Presets => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
