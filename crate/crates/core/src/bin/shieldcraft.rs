fn main() {
    std::process::exit(shieldcraft::harness::run_cli(std::env::args_os()));
}
