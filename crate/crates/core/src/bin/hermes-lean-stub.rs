//! Protocol stub standing in for the REPL in offline runs and tests.

fn main() -> std::io::Result<()> {
    hermes_core::lean::stub::run()
}
