fn main() {
    std::process::exit(kip::cli::main_with(std::env::args_os()));
}
