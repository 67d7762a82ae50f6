use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(voxelrf::cli::run(std::env::args().skip(1).collect()))
}
