fn main() { chainwork::cli::run_main() }
