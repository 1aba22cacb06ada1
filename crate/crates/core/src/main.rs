fn main() {
    std::process::exit(protopool::cli::run(std::env::args_os()));
}
