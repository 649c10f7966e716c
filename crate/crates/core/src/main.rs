fn main() {
    std::process::exit(evoline::cli::main_with_env());
}
