fn main() {
    if let Err(msg) = gpo_cli::init_threads() {
        eprintln!("error: {msg}");
        std::process::exit(gpo_cli::EXIT_USAGE);
    }
    std::process::exit(gpo_cli::main_with_args(std::env::args_os()));
}
