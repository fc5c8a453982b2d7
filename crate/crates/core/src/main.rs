fn main() {
    std::process::exit(trbf_uot::cli::run_command(std::env::args_os()));
}
