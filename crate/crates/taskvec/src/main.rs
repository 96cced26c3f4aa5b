fn main() {
    std::process::exit(taskvec::run_cli());
}
