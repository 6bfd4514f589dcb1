fn main() {
    std::process::exit(spanret::run(std::env::args_os()));
}
