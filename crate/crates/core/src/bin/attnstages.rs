fn main() {
    std::process::exit(attn_stages::cli::main_with_args(std::env::args_os()));
}
