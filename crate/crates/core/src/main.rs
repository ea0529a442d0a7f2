fn main() {
    std::process::exit(scenecomp::cli::run(std::env::args_os()));
}
