fn main() {
    std::process::exit(maskclip_core::cli::main_with(std::env::args_os()));
}
