//! Fixtures shared by the benchmarks.

use cyclecast::codec::{EncodedExample, FeatureSchema};
use cyclecast::pipeline::{prepare_synthetic, PrepareOptions};
use cyclecast::synth::{Process, WorldSpec};

/// Encoded examples (with histories) from a small synthetic cohort.
pub fn examples(users: usize, seed: u64) -> (FeatureSchema, Vec<EncodedExample>) {
    let schema = FeatureSchema::default();
    let opts = PrepareOptions { with_history: true, ..Default::default() };
    let prepared = prepare_synthetic(&WorldSpec::with_users(users, seed), Process::Bms, &schema, &opts).expect("synthetic cohort");
    (schema, prepared.examples)
}
