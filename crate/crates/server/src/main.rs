fn main() -> std::process::ExitCode {
    rlabs_server::cli::main()
}
