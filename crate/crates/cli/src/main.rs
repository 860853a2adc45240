mod export;
mod grad_check;
mod train;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Training and verification driver for virtual-gradient optimizers.
#[derive(Debug, Parser)]
#[command(name = "vgrad", version, about, long_about = None, max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, manifest and checkpoint
    Train(train::TrainArgs),
    /// Run the Monte Carlo verification suite and write its CSVs
    Verify(verify::VerifyArgs),
    /// Check backward rules and model gradients against finite differences
    GradCheck(grad_check::GradCheckArgs),
    /// Print a model graph, or its gradient graph, in text form
    ExportGraph(export::ExportArgs),
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Verify(a) => verify::run(a),
        Command::GradCheck(a) => grad_check::run(a),
        Command::ExportGraph(a) => export::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Comma-separated positive layer widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl std::str::FromStr for Widths {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|w| match w.trim().parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(format!("`{w}` is not a positive width")),
            })
            .collect::<Result<_, _>>()
            .map(Widths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn help_of(path: &[&str]) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        let mut sub = &mut cmd;
        for name in path {
            sub = sub.find_subcommand_mut(name).expect("subcommand exists");
        }
        sub.render_long_help().to_string()
    }

    #[test]
    fn help_matches_golden_files() {
        let cases: [(&[&str], &str); 5] = [
            (&[], include_str!("../golden/help.txt")),
            (&["train"], include_str!("../golden/help_train.txt")),
            (&["verify"], include_str!("../golden/help_verify.txt")),
            (&["grad-check"], include_str!("../golden/help_grad_check.txt")),
            (&["export-graph"], include_str!("../golden/help_export_graph.txt")),
        ];
        for (path, golden) in cases {
            let got = help_of(path);
            if std::env::var_os("VGRAD_BLESS").is_some() {
                let name = if path.is_empty() { "help".to_string() } else { format!("help_{}", path[0].replace('-', "_")) };
                std::fs::write(format!("{}/golden/{name}.txt", env!("CARGO_MANIFEST_DIR")), &got).unwrap();
                continue;
            }
            assert_eq!(got, golden, "help for {path:?} drifted; rerun with VGRAD_BLESS=1 to update");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn widths_parse() {
        assert_eq!("16,8".parse::<Widths>().unwrap(), Widths(vec![16, 8]));
        assert!("16,0".parse::<Widths>().is_err());
        assert!("a".parse::<Widths>().is_err());
    }
}
