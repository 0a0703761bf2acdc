fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(guided_crop::cli::parse_and_run(std::env::args_os()));
}
