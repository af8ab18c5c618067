use ffe_flow::synth::{generate_pair, CaseKind, FlowCase, SyntheticPair};

use crate::config::SynthSettings;
use crate::format::{FramePairRecord, Metadata};
use crate::Result;

pub fn case(kind: CaseKind, n: usize, seed: u64, s: &SynthSettings) -> FlowCase {
    let mut c = FlowCase::new(kind, n, seed);
    c.dt_factor = s.dt_factor;
    c.rk4_substeps = s.rk4_substeps;
    c.beltrami.nu = s.nu;
    c
}

/// `count` pairs with seeds `base_seed, base_seed + 1, …`.
pub fn pairs(
    kind: CaseKind,
    count: usize,
    n: usize,
    base_seed: u64,
    s: &SynthSettings,
) -> Result<Vec<SyntheticPair>> {
    (0..count as u64)
        .map(|i| Ok(generate_pair(&case(kind, n, base_seed.wrapping_add(i), s))?))
        .collect()
}

pub fn record(kind: CaseKind, seed: u64, pair: SyntheticPair) -> FramePairRecord {
    FramePairRecord {
        source: pair.source,
        target: pair.target,
        ground_truth: Some(pair.flow),
        meta: Metadata {
            case: Some(kind.name().to_string()),
            seed: Some(seed),
            units: Some("unit".to_string()),
        },
    }
}
