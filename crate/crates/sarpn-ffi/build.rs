fn main() { println!("cargo:rerun-if-changed=src/lib.rs"); }
