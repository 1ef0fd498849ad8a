fn main() {
    std::process::exit(particle_bridge::cli::run_command(std::env::args_os()));
}
