use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match sparc::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| sparc::cli::run(cli)) {
        Ok(Ok(text)) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush());
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(2),
    }
}
