fn main() {
    let stdout = std::io::stdout();
    let code = sedkit_core::cli::run_cli(std::env::args_os(), &mut stdout.lock());
    std::process::exit(code);
}
