fn main() {
    std::process::exit(microphys::cli::dispatch(std::env::args_os()));
}
