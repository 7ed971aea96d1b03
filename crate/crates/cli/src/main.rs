fn main() {
    std::process::exit(sfd_cli::run_from_args(std::env::args_os()));
}
