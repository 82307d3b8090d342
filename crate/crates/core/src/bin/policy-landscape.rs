fn main() {
    std::process::exit(policy_landscape::cli::main_with_args(std::env::args_os()));
}
