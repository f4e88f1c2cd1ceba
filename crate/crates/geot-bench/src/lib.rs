//! Benchmark-only crate; see `benches/pipeline.rs` for the measured
//! paths: neighbor search, affinity-graph construction, the network
//! forward pass, and one full differentiated training objective.
