fn main() {
    std::process::exit(failsense::evalcli::run_cli(std::env::args_os()));
}
