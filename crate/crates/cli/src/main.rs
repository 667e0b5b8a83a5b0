use std::process::ExitCode;

fn main() -> ExitCode {
    match cvek_cli::app::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.trim_end());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
