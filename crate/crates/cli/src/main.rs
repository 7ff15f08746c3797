use std::process::ExitCode;

fn main() -> ExitCode {
    match sgc_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", sgc_cli::describe(&err));
            ExitCode::from(sgc_cli::exit_code(&err) as u8)
        }
    }
}
