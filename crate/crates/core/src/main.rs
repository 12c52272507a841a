fn main() {
    std::process::exit(streamdet::cli_main());
}
