fn main() {
    std::process::exit(fbmflow::cli::run());
}
