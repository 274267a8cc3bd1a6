use std::process::ExitCode;

fn main() -> ExitCode {
    cil::cli::main_entry()
}
