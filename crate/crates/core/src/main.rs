fn main() {
    std::process::exit(relu_corr::cli::dispatch(std::env::args_os()));
}
