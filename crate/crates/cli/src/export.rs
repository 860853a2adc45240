use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use vgrad::autodiff::{gradients, virtual_gradients, PreconditionerSpec};
use vgrad::graph::to_text;
use vgrad::models::{self, Architecture};
use vgrad::{Graph, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    /// The forward graph only
    Forward,
    /// Forward graph extended with standard gradient nodes
    Gradient,
    /// Forward graph extended with preconditioned (virtual) gradient nodes
    Virtual,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Model architecture: mlp5, vgg6 or resnet20
    #[arg(long, default_value = "mlp5")]
    model: Architecture,
    /// Export the three-parameter two-level composite instead of a model
    #[arg(long, conflicts_with_all = ["model", "widths", "batch"])]
    example: bool,
    /// Comma-separated layer widths [default: the model's standard widths]
    #[arg(long)]
    widths: Option<crate::Widths>,
    /// Minibatch extent baked into the graph
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Which graph to print
    #[arg(long, value_enum, default_value = "forward")]
    graph: GraphKind,
    /// Scaling coefficient for the virtual gradient graph
    #[arg(long, default_value_t = 0.1)]
    s: Real,
    /// Write to this file instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn render(a: &ExportArgs) -> anyhow::Result<String> {
    let forward: Graph = if a.example {
        models::two_level_composite(3)?
    } else {
        models::build(a.model, a.batch, a.widths.as_ref().map(|w| w.0.as_slice()))?.graph
    };
    let graph = match a.graph {
        GraphKind::Forward => forward,
        GraphKind::Gradient => gradients(&forward)?.graph,
        GraphKind::Virtual => virtual_gradients(&forward, &PreconditionerSpec::bind(&forward, a.s)?)?.graph,
    };
    Ok(to_text(&graph))
}

pub fn run(a: ExportArgs) -> anyhow::Result<u8> {
    let text = render(&a)?;
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Cli;
    use clap::Parser;

    fn args(extra: &[&str]) -> ExportArgs {
        let mut argv = vec!["vgrad", "export-graph"];
        argv.extend_from_slice(extra);
        match Cli::parse_from(argv).command {
            crate::Command::ExportGraph(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn example_export_round_trips() {
        for kind in ["forward", "gradient", "virtual"] {
            let text = render(&args(&["--example", "--graph", kind])).unwrap();
            let parsed = vgrad::graph::parse_text(&text).unwrap();
            assert_eq!(to_text(&parsed), text, "{kind}");
        }
    }

    #[test]
    fn model_export_lists_every_node() {
        let text = render(&args(&["--model", "mlp5", "--widths", "4,4,4,4", "--batch", "2"])).unwrap();
        let g = models::build_mlp5(2, &[4, 4, 4, 4]).unwrap().graph;
        assert_eq!(text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count(), g.len());
    }
}
