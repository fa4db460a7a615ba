use clap::Parser;
use hcl_cli::cli::{Cli, Command};
use hcl_cli::commands;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, resume } => common.load().and_then(|cfg| commands::train(&cfg, resume)).map(drop),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => commands::eval(&common, &checkpoint, split).map(drop),
        Command::Gdv {
            common,
            checkpoint,
            split,
            raw,
        } => commands::gdv(&common, &checkpoint, split, raw).map(drop),
        Command::Compare { common } => common.load().and_then(|cfg| commands::compare(&cfg)).map(drop),
        Command::Grid { common } => common.load().and_then(|cfg| commands::grid(&cfg)).map(drop),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
