use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use ikno_cli::{bench, gen, run, study, verify, CliError, RunConfig};

/// Command name, the keys it accepts (as flags and in config files) and a summary.
fn commands() -> Vec<(&'static str, Vec<&'static str>, &'static str)> {
    vec![
        ("gen-data", gen::KEYS.to_vec(), "Generate a synthetic dataset"),
        ("verify", verify::KEYS.to_vec(), "Run the oracle, convergence, PD and gradient suites"),
        ("finite-order-study", study::KEYS.to_vec(), "Train with a fixed kernel across propagation orders"),
        ("bench", bench::KEYS.to_vec(), "Time fast resolvents against the dense inverse"),
        ("train", run::TRAIN_KEYS.to_vec(), "Train a model on a dataset"),
        ("eval", run::EVAL_KEYS.to_vec(), "Evaluate a trained run or its initialization"),
    ]
}

const SWITCHES: &[&str] = &["init"];

fn cli() -> Command {
    let mut app = Command::new("ikno")
        .about("Infinite-order kernel neural operators: data, verification, benchmarks and training")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, keys, about) in commands() {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("PATH").help("key = value config file"))
            .arg(Arg::new("seed").long("seed").value_name("U64"))
            .arg(Arg::new("out").long("out").value_name("DIR"));
        for key in keys {
            let mut arg = Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").action(ArgAction::Set);
            if SWITCHES.contains(&key) {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

fn build_config(name: &str, keys: &[&str], m: &ArgMatches) -> Result<RunConfig, CliError> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let mut flags = Vec::new();
    for key in keys.iter().copied().chain(["seed", "out"]) {
        if let Some(v) = m.get_one::<String>(key) {
            flags.push((key.to_string(), v.clone()));
        }
    }
    RunConfig::build(name, keys, file.as_deref(), flags)
}

fn emit<T: Serialize>(report: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn dispatch(name: &str, cfg: &RunConfig) -> Result<bool, CliError> {
    check_threads()?;
    match name {
        "gen-data" => emit(&gen::cmd_gen_data(cfg)?)?,
        "verify" => {
            let r = verify::cmd_verify(cfg)?;
            emit(&r)?;
            if !r.passed {
                for c in r.checks.iter().filter(|c| !c.passed) {
                    eprintln!("check failed: {} (deviation {:e}, threshold {:e})", c.name, c.deviation, c.threshold);
                }
                return Ok(false);
            }
        }
        "finite-order-study" => emit(&study::cmd_finite_order_study(cfg)?)?,
        "bench" => emit(&bench::cmd_bench(cfg)?)?,
        "train" => emit(&run::cmd_train(cfg)?)?,
        "eval" => emit(&run::cmd_eval(cfg)?)?,
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    }
    Ok(true)
}

fn check_threads() -> Result<usize, CliError> {
    ikno_cli::config::thread_cap()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let keys = commands().into_iter().find(|(n, _, _)| *n == name).map(|(_, k, _)| k).unwrap_or_default();
    let result = build_config(name, &keys, sub).and_then(|cfg| dispatch(name, &cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::ChecksFailed(_) => 1,
                _ => 2,
            })
        }
    }
}
