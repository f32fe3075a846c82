fn main() {
    std::process::exit(gfrnet::commands::run(std::env::args_os()));
}
