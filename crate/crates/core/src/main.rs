fn main() {
    std::process::exit(bltsch::cli::main_with(std::env::args_os()));
}
