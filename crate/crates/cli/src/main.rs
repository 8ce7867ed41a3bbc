fn main() {
    let code = iql_lab_cli::dispatch(std::env::args_os().collect());
    std::process::exit(code);
}
