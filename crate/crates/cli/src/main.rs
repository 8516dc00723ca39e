use starclust_cli::commands::{cmd_detect, cmd_eval, cmd_synth, DetectOutcome};
use starclust_cli::config::{apply_key, load_config_file, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
starclust - unsupervised star cluster detection

USAGE:
  starclust synth  [--config FILE] [--seed N] [--out DIR] [--survey S] [--pixel-scale X]
  starclust detect [--config FILE] [--seed N] [--out DIR] [--survey S] [--pixel-scale X]
  starclust eval   --report FILE --reference FILE

Flags override config-file keys. Surveys: ukidss, 2mass.
Exit codes: 0 ok, 2 bad config, 3 degenerate detection, 4 unreadable input.
";

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// Builds the run config from defaults, then the config file, then flags.
fn build_config(args: &[String]) -> Result<RunConfig, (u8, String)> {
    let mut cfg = RunConfig::default();
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(&'static str, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = args[i].as_str();
        let value = match args.get(i + 1) {
            Some(v) => v.clone(),
            None => return Err((2, format!("flag {flag} needs a value"))),
        };
        match flag {
            "--config" => config_path = Some(PathBuf::from(&value)),
            "--seed" => overrides.push(("seed", value)),
            "--out" => overrides.push(("out", value)),
            "--survey" => overrides.push(("survey", value)),
            "--pixel-scale" => {
                overrides.push(("input.pixel_scale_arcsec", value.clone()));
                overrides.push(("synth.pixel_scale_arcsec", value));
            }
            _ => return Err((2, format!("unknown flag {flag}\n{USAGE}"))),
        }
        i += 2;
    }
    if let Some(path) = config_path {
        load_config_file(&path, &mut cfg).map_err(|e| (2u8, e.to_string()))?;
    }
    for (key, value) in overrides {
        apply_key(&mut cfg, key, &value).map_err(|e| (2u8, e.to_string()))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    match command.as_str() {
        "synth" => {
            let cfg = match build_config(&args[1..]) {
                Ok(cfg) => cfg,
                Err((code, msg)) => return fail(code, &msg),
            };
            match cmd_synth(&cfg) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e.exit_code() as u8, &e.to_string()),
            }
        }
        "detect" => {
            let cfg = match build_config(&args[1..]) {
                Ok(cfg) => cfg,
                Err((code, msg)) => return fail(code, &msg),
            };
            match cmd_detect(&cfg) {
                Ok(DetectOutcome::Complete(_)) => ExitCode::SUCCESS,
                Ok(DetectOutcome::Degenerate) => {
                    eprintln!("detection degenerate: empty mask; diagnostic report written");
                    ExitCode::from(3)
                }
                Err(e) => fail(e.exit_code() as u8, &e.to_string()),
            }
        }
        "eval" => {
            let mut report = None;
            let mut reference = None;
            let rest = &args[1..];
            let mut i = 0;
            while i < rest.len() {
                let flag = rest[i].as_str();
                let Some(value) = rest.get(i + 1) else {
                    return fail(2, &format!("flag {flag} needs a value"));
                };
                match flag {
                    "--report" => report = Some(PathBuf::from(value)),
                    "--reference" => reference = Some(PathBuf::from(value)),
                    other => return fail(2, &format!("unknown flag {other}")),
                }
                i += 2;
            }
            let (Some(report), Some(reference)) = (report, reference) else {
                return fail(2, "eval needs --report and --reference");
            };
            match cmd_eval(&report, &reference) {
                Ok(table) => {
                    print!("{table}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.exit_code() as u8, &e.to_string()),
            }
        }
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            ExitCode::SUCCESS
        }
        other => fail(2, &format!("unknown command '{other}'\n{USAGE}")),
    }
}
