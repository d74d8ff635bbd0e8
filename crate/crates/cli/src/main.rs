fn main() {
    std::process::exit(mp3_cli::cli::dispatch(std::env::args_os()));
}
