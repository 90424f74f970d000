fn main() {
    std::process::exit(revit::cli::run(std::env::args_os()));
}
