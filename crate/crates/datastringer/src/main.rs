fn main() {
    env_logger::init();
    std::process::exit(datastringer::cli::main());
}
