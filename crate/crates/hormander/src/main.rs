fn main() {
    std::process::exit(hormander::cli::main_with(std::env::args_os()));
}
