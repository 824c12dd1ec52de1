fn main() {
    std::process::exit(qgfn::cli::main_with(std::env::args_os()));
}
