use std::process::ExitCode;

use clap::Parser;

// glibc fragments badly under the per-cycle worker threads.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cli = curistack_cli::Cli::parse();
    match curistack_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(curistack_cli::exit_code(&err))
        }
    }
}
