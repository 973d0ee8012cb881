//! Benchmark helpers live in `benches/`; this crate body is intentionally empty.
