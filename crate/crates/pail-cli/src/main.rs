fn main() {
    println!("pail");
}
