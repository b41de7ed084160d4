fn main() {
    std::process::exit(koopql::cli::main_entry());
}
