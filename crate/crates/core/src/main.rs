fn main() -> std::process::ExitCode {
    coplms::cli::main()
}
