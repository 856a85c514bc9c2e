fn main() {
    let code = expr3d::cli::run(std::env::args_os());
    std::process::exit(code);
}
