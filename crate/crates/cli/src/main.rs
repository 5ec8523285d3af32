fn main() {
    println!("llmtriage");
}
