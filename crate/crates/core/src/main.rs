fn main() {
    std::process::exit(amicable::cli::main());
}
