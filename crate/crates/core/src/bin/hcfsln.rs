fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed = std::env::var(hcfsln::cli::SEED_ENV).ok();
    std::process::exit(hcfsln::cli::main_with_args(std::env::args_os(), seed.as_deref()));
}
