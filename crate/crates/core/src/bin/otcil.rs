fn main() {
    std::process::exit(otcil::cli::main());
}
