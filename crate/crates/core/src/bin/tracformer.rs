fn main() {
    std::process::exit(tracformer::cli::dispatch(std::env::args_os()));
}
