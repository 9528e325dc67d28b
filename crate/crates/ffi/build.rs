use std::env;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    match cbindgen::generate_with_config(&dir, config) {
        Ok(b) => {
            b.write_to_file(dir.join("include").join("loopgas.h"));
        }
        // keep building when the header cannot be regenerated (e.g. a syntax
        // error mid-edit); the compiler reports the real problem
        Err(e) => println!("cargo:warning=header not regenerated: {e}"),
    }
}
