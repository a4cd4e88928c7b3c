fn main() {
    println!("mspt");
}
