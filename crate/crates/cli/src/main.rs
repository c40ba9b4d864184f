use std::process::ExitCode;

use dpml_cli::{run, CliError};

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    match run(std::env::args_os(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Clap(e)) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
