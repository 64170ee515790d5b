//! Acceptance checks for refbox live in `tests/acceptance.rs`; run them with
//! `cargo test -p refbox-validation --test acceptance`.
