//! Joint estimation of the operational radial topology and outaged load
//! sections of a three-phase unbalanced distribution feeder.
//!
//! The pipeline: parse a planning model ([`network`]), generate ground-truth
//! flows for a sampled operating point ([`powerflow`]), corrupt them into a
//! measurement set ([`measurement`]), translate model + measurements into a
//! weighted least-absolute-value MILP ([`milp`]), solve it ([`solver`]),
//! round and validate the estimate ([`estimator`]), and repeat over Monte
//! Carlo campaigns to compute MDR/MMS/MMO accuracy metrics ([`experiment`]).

pub mod estimator;
pub mod experiment;
pub mod io;
pub mod measurement;
pub mod milp;
pub mod network;
pub mod powerflow;
pub mod solver;

/// Stable 64-bit FNV-1a hash, used for reproducible model/measurement/truth
/// fingerprints in reports (must not vary across runs or worker counts).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
