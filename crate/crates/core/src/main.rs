fn main() {
    let args: Vec<String> = std::env::args().collect();
    let code = pagen_core::cli::run(&args, &mut std::io::stdout().lock());
    std::process::exit(code);
}
