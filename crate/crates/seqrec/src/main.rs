fn main() {
    std::process::exit(seqrec::cli_main());
}
