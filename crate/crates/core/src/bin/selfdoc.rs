fn main() {
    std::process::exit(selfdoc::cli::run(std::env::args_os()));
}
