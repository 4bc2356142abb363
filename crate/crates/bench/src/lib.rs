//! Shared fixtures for the benchmark suite live in the core crate; this
//! crate only hosts the criterion targets.
