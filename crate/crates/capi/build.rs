//! Generate the C header for the exported surface. The header lands in
//! `include/protovae.h` so downstream builds can consume it straight from
//! the source tree.

use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    let header = crate_dir.join("include/protovae.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("PROTOVAE_H".to_string()),
        cpp_compat: true,
        documentation: true,
        header: Some("/* C ABI for the protovae library. Generated; do not edit. */".to_string()),
        ..cbindgen::Config::default()
    };

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(e) => {
            // Keep `cargo build` usable mid-edit; the header test will
            // catch a stale or missing file.
            println!("cargo:warning=header generation failed: {e}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
