fn main() {
    std::process::exit(riskplan::cli::run());
}
