fn main() {
    eprintln!("breather-lab: subcommands not wired up yet");
    std::process::exit(2);
}
