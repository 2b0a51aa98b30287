//! Shared data generation for the benchmark targets.
