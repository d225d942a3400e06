fn main() {
    std::process::exit(difftraj_cli::run(std::env::args_os().skip(1)));
}
