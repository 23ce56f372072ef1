//! Holds the end-to-end acceptance run (`tests/acceptance.rs`). It lives in
//! its own package so that `cargo test --workspace` reaches it after every
//! `rmfg` test target.
