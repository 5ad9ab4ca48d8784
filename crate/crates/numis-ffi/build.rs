// Regenerates include/numis.h with cbindgen. Generation failures are
// non-fatal: the checked-in header is a working fallback, so packaging the
// crate without a usable cbindgen still builds.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = crate_dir.join("include/numis.h");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(e) => {
            println!(
                "cargo:warning=cbindgen failed ({}); keeping the checked-in include/numis.h",
                e
            );
        }
    }
}
