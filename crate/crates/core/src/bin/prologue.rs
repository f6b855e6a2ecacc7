fn main() -> std::process::ExitCode {
    prologue::cli::main()
}
