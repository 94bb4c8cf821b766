fn main() {
    std::process::exit(icfps_cli::dispatch(std::env::args_os()));
}
