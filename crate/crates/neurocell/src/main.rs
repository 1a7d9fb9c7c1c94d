fn main() {
    std::process::exit(neurocell::cli::run());
}
