use std::process::exit;

fn main() {
    exit(gacnn_cli::dispatch(std::env::args_os()));
}
