fn main() {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .init();
    std::process::exit(beliefspace_cli::run(std::env::args_os()));
}
