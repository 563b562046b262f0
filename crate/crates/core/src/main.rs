use std::process::ExitCode;

fn main() -> ExitCode {
    match hea_core::cli::run(std::env::args_os()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                clap_err.exit();
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
