fn main() -> std::process::ExitCode {
    coherence::cli::main()
}
