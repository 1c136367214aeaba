fn main() {
    std::process::exit(hiermon::cli::main_from_env());
}
