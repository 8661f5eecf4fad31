mod args;
mod commands;
mod config;
mod error;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;
use error::{EXIT_CONFIG, EXIT_OK};

fn run(argv: Vec<String>) -> i32 {
    let cmd = Cli::command();
    let argv = match config::expand(argv, &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let matches = match cmd.clone().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    let (sub_name, sub_m) = matches.subcommand().expect("subcommand is required");
    let echo = config::echo(&cmd, sub_name, sub_m);
    match commands::run(&cli.command, &echo) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args().collect()));
}
