fn main() {
    std::process::exit(steerlab_cli::dispatch(std::env::args_os()));
}
