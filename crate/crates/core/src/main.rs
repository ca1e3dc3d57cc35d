fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(ictlab::cli::run_cli(&args));
}
