fn main() -> std::process::ExitCode {
    seco_cli::app::main_entry()
}
