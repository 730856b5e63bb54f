fn main() {
    std::process::exit(wsi_screen::cli::run(std::env::args_os()));
}
