pub mod bench;
pub mod damcl;
pub mod detect;
pub mod generate;
pub mod mcl;
pub mod sample;
pub mod score;
pub mod synth;

use ctxlens::probe::{PrefixGrid, ProbeResult};
use ctxlens::reporting::aggregate_share;
use serde_json::{Map, Value};

use crate::args::{parse_list, parse_one};
use crate::context::Run;
use crate::error::CliResult;

pub fn grid(run: &Run, default: PrefixGrid) -> CliResult<PrefixGrid> {
    match &run.knobs.grid {
        Some(g) => parse_one(g, "grid"),
        None => Ok(default),
    }
}

/// `share_le_{c}` entries over the resolved results.
pub fn shares(run: &Run, results: &[ProbeResult]) -> CliResult<Map<String, Value>> {
    let cutoffs: Vec<usize> = match &run.knobs.share_cutoffs {
        Some(s) => parse_list(s, "share cutoff")?,
        None => vec![32, 96],
    };
    let resolved: Vec<ProbeResult> = results.iter().filter(|r| r.is_resolved()).cloned().collect();
    let mut out = Map::new();
    for c in cutoffs {
        let v = aggregate_share(&resolved, c).ok();
        out.insert(format!("share_le_{c}"), serde_json::to_value(v)?);
    }
    Ok(out)
}
