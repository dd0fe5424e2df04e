fn main() {
    std::process::exit(featvat::cli::main());
}
