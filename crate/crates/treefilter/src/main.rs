fn main() { std::process::exit(treefilter::cli::run()); }
