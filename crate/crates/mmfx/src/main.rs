fn main() {
    std::process::exit(mmfx::cli::run());
}
