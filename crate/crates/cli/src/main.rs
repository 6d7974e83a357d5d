fn main() {
    std::process::exit(carvecache_cli::run_cli(std::env::args_os()));
}
