fn main() {
    std::process::exit(branchfuse::cli::main_with_args(std::env::args_os()));
}
