use xrl::cli;

fn main() {
    cli::init_threads();
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(cli::run_command(&args));
}
