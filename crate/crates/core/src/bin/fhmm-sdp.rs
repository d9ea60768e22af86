fn main() -> std::process::ExitCode {
    fhmm_sdp::cli::main()
}
