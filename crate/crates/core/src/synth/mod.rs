//! Synthetic scene generation and the independent oracles (brute-force
//! contact, central finite differences) used by tests and `gradcheck`.

mod scenes;

pub use scenes::{generate, BulgeSpec, SceneKind, SynthOutput, SynthSpec};

use rayon::prelude::*;

use crate::contact::{dist2, ContactEntry, ContactMap};
use crate::geom::Vec3;
use crate::{Error, Result};

/// SplitMix64 stream derivation: one master seed, one tag per consumer.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Exhaustive O(N*M) nearest-neighbor contact map; the correctness oracle
/// for the spatial-hash implementation.
pub fn brute_force_contact(hand: &[Vec3], object: &[Vec3], tau: f64) -> ContactMap {
    assert!(tau > 0.0);
    let entries: Vec<ContactEntry> = hand
        .par_iter()
        .map(|h| {
            let mut best: Option<(f64, usize)> = None;
            for (j, o) in object.iter().enumerate() {
                let d2 = dist2(o, h);
                if best.map_or(true, |(bd, bi)| (d2, j) < (bd, bi)) {
                    best = Some((d2, j));
                }
            }
            match best {
                Some((d2, j)) => {
                    let distance = d2.sqrt();
                    ContactEntry { in_contact: distance < tau, distance, nearest: Some(j) }
                }
                None => ContactEntry { in_contact: false, distance: f64::INFINITY, nearest: None },
            }
        })
        .collect();
    ContactMap { tau, entries }
}

/// Central-difference gradient of a scalar function, 64-bit.
pub fn fd_gradient<F>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { context: format!("fd_gradient at coordinate {i}") });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between an analytic and a finite-difference gradient
/// entry, floored to absorb FD roundoff on near-zero gradients.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}
