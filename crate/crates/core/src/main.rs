fn main() {
    std::process::exit(progtune::cli::dispatch(std::env::args_os()));
}
