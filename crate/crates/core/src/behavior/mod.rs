//! Confirmation of device-guarded branches and extraction of the code they
//! control.
//!
//! A guard site is a conditional branch whose condition depends on device
//! information. It becomes a device guard when a string tied to the
//! comparison by def-use chains, or defined in the same blocks, names a known
//! brand, OS or model. Both arms of a confirmed guard are extracted, together
//! with every method transitively callable from them.

mod guards;
mod region;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use guards::{
    collect_guard_strings, confirm_device_guard, find_guard_sites, find_guard_sites_in, taken_means_match, Comparison,
    DeviceGuard, GuardSite, OperandSide,
};
pub use region::{arm_regions, extract_region, ArmRegion, BehaviorSnippet, Evidence, EvidenceKind};

use crate::device_db::DeviceInfoDB;
use crate::frontend::{MethodId, Program};
use crate::graphs::{Icfg, PostDominators, ReachingDefs};
use crate::taint::TaintResult;
use crate::Deadline;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub sites: Vec<GuardSite>,
    pub guards: Vec<DeviceGuard>,
    pub snippets: Vec<BehaviorSnippet>,
    /// Set when the deadline stopped guard processing or region extraction.
    pub truncated: bool,
}

/// Runs site discovery, confirmation and extraction over a taint result.
pub fn detect_behaviors(program: &Program, icfg: &Icfg, taint: &TaintResult, db: &DeviceInfoDB, deadline: &Deadline) -> Detection {
    let mut out = Detection::default();
    let mut pdoms: HashMap<MethodId, PostDominators> = HashMap::new();
    for id in taint.tainted_methods() {
        let Some(cfg) = icfg.cfg(id) else { continue };
        let rd = ReachingDefs::compute(program.method(id), cfg);
        let sites = find_guard_sites_in(program, id, &rd, taint);
        for site in sites {
            if deadline.expired() {
                out.truncated = true;
                return out;
            }
            let strings = collect_guard_strings(program, &site, cfg, &rd);
            if let Some(guard) = confirm_device_guard(&site, &strings, db) {
                let pdom = pdoms.entry(id).or_insert_with(|| PostDominators::compute(cfg));
                let snippet = extract_region(program, icfg, pdom, &guard, deadline);
                out.truncated |= snippet.truncated;
                out.guards.push(guard);
                out.snippets.push(snippet);
            }
            out.sites.push(site);
        }
    }
    out
}
