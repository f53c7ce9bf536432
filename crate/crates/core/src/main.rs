fn main() {
    std::process::exit(tilewise::cli::main_from(std::env::args_os()));
}
