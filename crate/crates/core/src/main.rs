fn main() {
    std::process::exit(hda::runner::cli::main_with_args(std::env::args_os()));
}
