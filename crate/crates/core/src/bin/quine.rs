fn main() {
    let argv: Vec<_> = std::env::args_os().collect();
    let status = quine::cli::main_with(argv, quine::tools::current_env());
    std::process::exit(status);
}
