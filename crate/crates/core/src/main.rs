//! Entry point for the `unident` command-line tool.

fn main() {
    let code = unident::cli::run(std::env::args_os());
    std::process::exit(code);
}
