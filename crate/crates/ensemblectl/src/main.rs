fn main() {
    std::process::exit(ensemblectl::cli::run());
}
