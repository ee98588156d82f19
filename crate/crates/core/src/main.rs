fn main() {
    std::process::exit(mergeforge::cli::main());
}
