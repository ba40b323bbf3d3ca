fn main() {
    println!("distillkit");
}
