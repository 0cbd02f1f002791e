fn main() {
    std::process::exit(obs_diff_cli::run_cli(std::env::args_os()));
}
