fn main() {
    usra_core::tune_allocator();
    std::process::exit(usra_core::cli::run_cli(std::env::args_os()));
}
