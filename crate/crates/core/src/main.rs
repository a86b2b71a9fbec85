use anyhow::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = sofpidr::cli::run_command(std::env::args_os())?;
    std::process::exit(code);
}
