fn main() -> std::process::ExitCode {
    lcg_cli::main()
}
