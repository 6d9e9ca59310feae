fn main() {
    std::process::exit(prosody_ssl::cli::dispatch(std::env::args()));
}
