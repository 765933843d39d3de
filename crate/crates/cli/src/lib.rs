//! The `nmsparse` command line: `fetch`, `train`, `compare`, `sad-analysis`
//! and `project`. Exposed as a library so the commands can be driven from tests.

pub mod args;
pub mod commands;
pub mod error;
pub mod fetch;

pub use args::{Cli, Command, GlobalArgs};
pub use error::{CliError, CliResult};

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Fetch(a) => {
            for (name, outcome) in fetch::fetch_mnist(&a.mirror, &g.data_dir)? {
                println!("{name}: {outcome:?}");
            }
        }
        Command::Train(a) => commands::cmd_train(g, a)?,
        Command::Compare(a) => {
            commands::cmd_compare(g, a)?;
        }
        Command::SadAnalysis(a) => {
            commands::cmd_sad_analysis(g, a)?;
        }
        Command::Project(a) => {
            commands::cmd_project(g, a)?;
        }
    }
    Ok(())
}
