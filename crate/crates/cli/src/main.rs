fn main() {
    std::process::exit(voxdiff_cli::run(std::env::args_os()));
}
