fn main() {
    protovae::cli::main();
}
