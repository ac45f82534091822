use std::process::ExitCode;

use bidrn_cli::{configure_threads, run, EXIT_OK};

fn main() -> ExitCode {
    let threads = std::env::var("BIDRN_THREADS").ok();
    let result = match configure_threads(threads.as_deref()) {
        Ok(()) => run(std::env::args_os()),
        Err(r) => r,
    };
    if result.code == EXIT_OK {
        println!("{}", result.summary);
    } else {
        eprintln!("{}", result.summary);
    }
    ExitCode::from(result.code as u8)
}
