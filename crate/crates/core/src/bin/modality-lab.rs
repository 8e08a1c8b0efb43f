fn main() {
    std::process::exit(modality_lab::cli::run());
}
