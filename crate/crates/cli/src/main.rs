use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use store_core::config::{PipelineConfig, Preset};
use store_core::pipeline::{Pipeline, Stage, StageRun};

fn command() -> Command {
    let mut cmd = Command::new("store")
        .about("Dense item tokenizer, semantic identifiers and generative recommendation on one small transformer")
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key = value config file"))
        .arg(Arg::new("preset").long("preset").global(true).value_parser(["desk", "paper"]).help("base preset [default: desk]"))
        .arg(Arg::new("force").long("force").global(true).action(ArgAction::SetTrue).help("overwrite artifacts built with a different config"))
        .arg(Arg::new("no-alignment").long("no-alignment").global(true).action(ArgAction::SetTrue).help("train the recommender without the alignment task"));
    for key in PipelineConfig::keys().into_iter().filter(|k| k != "preset") {
        let key: &'static str = Box::leak(key.into_boxed_str());
        cmd = cmd.arg(Arg::new(key).long(key).global(true).value_name("VALUE").help("override this config key").hide_short_help(key != "seed"));
    }
    for stage in Stage::ALL {
        cmd = cmd.subcommand(Command::new(stage.name()).about(about(stage)));
    }
    cmd.subcommand(Command::new("run-all").about("Run every stage, resuming from the last up-to-date one"))
        .subcommand(Command::new("show-config").about("Print the resolved configuration"))
}

fn about(stage: Stage) -> &'static str {
    match stage {
        Stage::Synth => "Generate (or ingest) the item catalog and user sequences",
        Stage::TokenizerTrain => "Train the dense tokenizer",
        Stage::Embed => "Extract dense item embeddings",
        Stage::Cluster => "Cluster embeddings into semantic identifiers",
        Stage::RecTrain => "Train the generative recommender",
        Stage::EvalRetrieval => "Evaluate retrieval with constrained beam search",
        Stage::EvalScoring => "Fine-tune and evaluate yes/no scoring",
    }
}

fn resolve(m: &ArgMatches) -> store_core::Result<PipelineConfig> {
    let preset = m.get_one::<String>("preset").map(|p| p.parse::<Preset>()).transpose()?;
    let mut overrides: Vec<(String, String)> = PipelineConfig::keys()
        .into_iter()
        .filter(|k| k != "preset" && m.value_source(k) == Some(ValueSource::CommandLine))
        .filter_map(|k| m.get_one::<String>(&k).cloned().map(|v| (k, v)))
        .collect();
    if m.get_flag("no-alignment") {
        overrides.push(("alignment".into(), "false".into()));
    }
    PipelineConfig::resolve(preset, m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)
}

fn print_run(run: &StageRun) {
    if let Some(report) = &run.report {
        println!("[{}]{}", run.stage.name(), if run.skipped { " (cached)" } else { "" });
        print!("{}", report.to_table());
    }
}

fn run(m: &ArgMatches) -> store_core::Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let config = resolve(sub)?;
    let force = sub.get_flag("force");
    match name {
        "show-config" => print!("{}", config.render(&PipelineConfig::keys().iter().map(String::as_str).collect::<Vec<_>>())?),
        "run-all" => {
            for run in Pipeline::new(config)?.run_all(force)? {
                print_run(&run);
            }
        }
        stage => print_run(&Pipeline::new(config)?.run_stage(stage.parse()?, force)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_divergence() {
                ExitCode::from(3)
            } else if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn overrides_follow_flags() {
        let m = command().try_get_matches_from(["store", "cluster", "--k", "8", "--seed", "3"]).unwrap();
        let c = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!((c.k, c.seed), (8, 3));
        assert_eq!(c.d, PipelineConfig::desk().d);
        assert!(c.alignment);
        let m = command().try_get_matches_from(["store", "rec-train", "--no-alignment"]).unwrap();
        assert!(!resolve(m.subcommand().unwrap().1).unwrap().alignment);
    }
}
