use std::process::ExitCode;

fn main() -> ExitCode {
    match aprop_cli::run_from_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("aprop: {msg}");
            ExitCode::FAILURE
        }
    }
}
