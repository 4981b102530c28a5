use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = thematic_cli::Cli::parse();
    thematic_cli::init_logging(cli.global.verbose);
    let mut out = std::io::stdout().lock();
    match thematic_cli::run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
