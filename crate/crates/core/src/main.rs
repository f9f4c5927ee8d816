fn main() {
    std::process::exit(pam_lab::cli::run(std::env::args_os()));
}
