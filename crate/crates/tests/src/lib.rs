//! Test-only package: the acceptance checks live in `tests/acceptance.rs`.
