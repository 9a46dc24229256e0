fn main() { std::process::exit(pgbm::cli::run()); }
