fn main() {
    let code = conformal_cli::run(std::env::args_os());
    std::process::exit(code);
}
