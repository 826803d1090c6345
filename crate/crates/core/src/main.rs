fn main() {
    std::process::exit(tpt_calib::cli::main());
}
