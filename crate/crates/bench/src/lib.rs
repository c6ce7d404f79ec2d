//! Criterion benchmarks for the solver stages live under `benches/`.
