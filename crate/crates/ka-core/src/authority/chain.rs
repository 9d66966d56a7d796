//! Certification path building and validation.
//!
//! A structural path runs from the leaf through certificates whose subject
//! DN matches the previous certificate's issuer DN (no repeats), ending at
//! a certificate whose issuer DN names a trust anchor. A path is valid
//! when every certificate's signature verifies under its parent's key,
//! every validity window contains the evaluation instant, and no
//! certificate is listed in its issuer's latest CRL.
//!
//! The verdict is deterministic: if any valid path exists the chain is
//! valid; if no structural path exists the reason is `NoPathToAnchor`;
//! otherwise every structural path is assigned its first defect (scanning
//! certificates leaf→anchor, per-certificate check order signature,
//! not-yet-valid, expired, revoked) and the reported reason is the
//! highest-ranked defect across paths, ranked
//! `Revoked > Expired > NotYetValid > BadSignature`.

use std::collections::BTreeSet;

use crate::types::Timestamp;

use super::Certificate;

/// A root of trust: the DN and public key callers already trust.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrustAnchor {
    pub dn: String,
    pub algorithm: String,
    pub public_key: Vec<u8>,
}

/// Why a chain failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainFailure {
    NoPathToAnchor,
    BadSignature,
    NotYetValid,
    Expired,
    Revoked,
}

impl ChainFailure {
    pub fn name(self) -> &'static str {
        match self {
            ChainFailure::NoPathToAnchor => "NoPathToAnchor",
            ChainFailure::BadSignature => "BadSignature",
            ChainFailure::NotYetValid => "NotYetValid",
            ChainFailure::Expired => "Expired",
            ChainFailure::Revoked => "Revoked",
        }
    }

    fn rank(self) -> u8 {
        match self {
            ChainFailure::NoPathToAnchor => 0,
            ChainFailure::BadSignature => 1,
            ChainFailure::NotYetValid => 2,
            ChainFailure::Expired => 3,
            ChainFailure::Revoked => 4,
        }
    }
}

/// Outcome of path validation. Verdict-valued: a revoked or expired chain
/// is a negative verdict, not an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid {
        /// Certificate ids leaf→top, then the anchor DN.
        path: Vec<String>,
    },
    Invalid {
        reason: ChainFailure,
    },
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainVerdict::Valid { .. })
    }

    pub fn reason(&self) -> Option<ChainFailure> {
        match self {
            ChainVerdict::Valid { .. } => None,
            ChainVerdict::Invalid { reason } => Some(*reason),
        }
    }
}

/// Checks a chain validator needs from its environment: revocation lookup
/// and signature verification.
pub trait ChainEnv {
    /// Is `serial` listed in the latest CRL of the issuer named `issuer_dn`?
    fn is_revoked(&self, issuer_dn: &str, serial: u64) -> bool;

    fn verify_signature(
        &self,
        algorithm: &str,
        public_key: &[u8],
        message: &[u8],
        signature: &[u8],
    ) -> bool;
}

fn cert_key(cert: &Certificate) -> (String, u64) {
    (cert.issuer_dn.clone(), cert.serial)
}

/// First defect of one structural path, or `None` when the path is fully
/// valid. `parents[i]` is the key that must verify `path[i]`.
fn path_defect(
    path: &[&Certificate],
    anchor: &TrustAnchor,
    at: Timestamp,
    env: &impl ChainEnv,
) -> Option<ChainFailure> {
    for (i, cert) in path.iter().enumerate() {
        let (parent_alg, parent_key): (&str, &[u8]) = match path.get(i + 1) {
            Some(parent) => (&parent.subject_key_algorithm, &parent.subject_public_key),
            None => (&anchor.algorithm, &anchor.public_key),
        };
        if !env.verify_signature(parent_alg, parent_key, &cert.signed_bytes(), &cert.signature) {
            return Some(ChainFailure::BadSignature);
        }
        if at < cert.valid_from {
            return Some(ChainFailure::NotYetValid);
        }
        if at >= cert.valid_to {
            return Some(ChainFailure::Expired);
        }
        if env.is_revoked(&cert.issuer_dn, cert.serial) {
            return Some(ChainFailure::Revoked);
        }
    }
    None
}

/// Build and validate a path from `leaf` to one of `anchors` through
/// `pool`.
pub fn verify_chain(
    leaf: &Certificate,
    pool: &[Certificate],
    anchors: &[TrustAnchor],
    at: Timestamp,
    env: &impl ChainEnv,
) -> ChainVerdict {
    // Deterministic exploration order.
    let mut candidates: Vec<&Certificate> = pool.iter().collect();
    candidates.sort_by_key(|c| cert_key(c));

    let mut best_defect: Option<ChainFailure> = None;
    let mut structural_paths = 0usize;

    // DFS over structural extensions; `visited` prevents cycles.
    type Frame<'c> = (Vec<&'c Certificate>, BTreeSet<(String, u64)>);
    let mut stack: Vec<Frame<'_>> = vec![(vec![leaf], [cert_key(leaf)].into_iter().collect())];

    while let Some((path, visited)) = stack.pop() {
        let top = path.last().expect("paths are non-empty");

        for anchor in anchors {
            if anchor.dn != top.issuer_dn {
                continue;
            }
            structural_paths += 1;
            match path_defect(&path, anchor, at, env) {
                None => {
                    let mut ids: Vec<String> = path.iter().map(|c| c.id()).collect();
                    ids.push(anchor.dn.clone());
                    return ChainVerdict::Valid { path: ids };
                }
                Some(defect) => {
                    if best_defect.is_none_or(|b| defect.rank() > b.rank()) {
                        best_defect = Some(defect);
                    }
                }
            }
        }

        for candidate in &candidates {
            if candidate.subject_dn != top.issuer_dn {
                continue;
            }
            let key = cert_key(candidate);
            if visited.contains(&key) {
                continue;
            }
            let mut extended = path.clone();
            extended.push(candidate);
            let mut extended_visited = visited.clone();
            extended_visited.insert(key);
            stack.push((extended, extended_visited));
        }
    }

    match (structural_paths, best_defect) {
        (0, _) => ChainVerdict::Invalid {
            reason: ChainFailure::NoPathToAnchor,
        },
        (_, Some(reason)) => ChainVerdict::Invalid { reason },
        (_, None) => unreachable!("structural paths without defects return early"),
    }
}
