//! Benchmarks for state-space exploration and rule checking.
