fn main() {
    std::process::exit(deepfusion::cli::cli_entry(std::env::args_os()));
}
