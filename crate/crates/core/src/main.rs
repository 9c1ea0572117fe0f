fn main() {
    std::process::exit(linear_slam::cli::run(std::env::args_os()));
}
