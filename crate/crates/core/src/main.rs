fn main() {
    std::process::exit(shortcut::cli::main_exit_code());
}
