fn main() {
    std::process::exit(smd::cli::main());
}
