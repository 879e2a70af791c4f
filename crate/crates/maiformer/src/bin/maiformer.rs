fn main() {
    // CLI wiring lands with the cli module.
    eprintln!("maiformer: not yet wired");
    std::process::exit(2);
}
