// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<_> = std::env::args_os().collect();
    if let Err(e) = <moe_lens::cli::Cli as clap::Parser>::try_parse_from(&args) {
        e.exit();
    }
    match moe_lens::cli::run(args) {
        Ok(outcome) => {
            println!("{}", outcome.run_dir.display());
            std::process::exit(outcome.exit_code);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
