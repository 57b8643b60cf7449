fn main() {
    std::process::exit(schemanet::cli::run(std::env::args_os()));
}
