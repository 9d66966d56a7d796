//! Organizational measures as code: operator authentication, dual-control
//! approval tokens and the hash-chained audit log.
//!
//! Privileged operations name an operation and a digest of their exact
//! parameters; [`ControlState::authorize`] issues a single-use
//! [`ApprovalToken`] only when enough *distinct* authenticated operators
//! back the request (two for dual-control operations). Every privileged
//! operation then appends one [`AuditRecord`], hash-linked to its
//! predecessor, so any later modification, deletion or reorder of the log
//! is detectable.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::KdfParams;
use crate::store::canonical::{self, DocBuilder, Value};
use crate::types::{OperatorId, Timestamp, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("operation requires {required} distinct approvers, got {distinct}")]
    DualControlRequired { required: usize, distinct: usize },
    #[error("operator {0} is inactive")]
    OperatorInactive(OperatorId),
    #[error("unknown operator: {0}")]
    UnknownOperator(OperatorId),
    #[error("operator authentication failed")]
    AuthenticationFailed,
    #[error("approval token expired")]
    TokenExpired,
    #[error("approval token already used")]
    TokenReused,
    #[error("approval token does not match this operation's parameters")]
    ParameterMismatch,
    #[error("duplicate operator id: {0}")]
    DuplicateOperator(OperatorId),
    #[error("kdf failure: {0}")]
    Kdf(String),
}

/// Salted KDF verifier for an operator secret; the secret itself is never
/// stored. Verification gives a single yes/no with no partial-match signal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CredentialVerifier {
    pub kdf: KdfParams,
    pub salt: Vec<u8>,
    pub hash: Vec<u8>,
}

impl CredentialVerifier {
    pub fn derive(
        secret: &str,
        kdf: &KdfParams,
        rng: &mut dyn RngCore,
    ) -> Result<CredentialVerifier, ControlError> {
        let mut salt = vec![0u8; 16];
        rng.fill_bytes(&mut salt);
        let hash = kdf_hash(secret, kdf, &salt)?;
        Ok(CredentialVerifier {
            kdf: kdf.clone(),
            salt,
            hash,
        })
    }

    pub fn matches(&self, secret: &str) -> bool {
        match kdf_hash(secret, &self.kdf, &self.salt) {
            Ok(candidate) => {
                // Full-width comparison; no early exit on first mismatch.
                let mut diff = 0u8;
                for (a, b) in candidate.iter().zip(self.hash.iter()) {
                    diff |= a ^ b;
                }
                diff == 0 && candidate.len() == self.hash.len()
            }
            Err(_) => false,
        }
    }
}

fn kdf_hash(secret: &str, kdf: &KdfParams, salt: &[u8]) -> Result<Vec<u8>, ControlError> {
    let params = argon2::Params::new(kdf.memory_kib, kdf.iterations, kdf.parallelism, Some(32))
        .map_err(|e| ControlError::Kdf(e.to_string()))?;
    let argon = argon2::Argon2::new(argon2::Algorithm::Argon2id, argon2::Version::V0x13, params);
    let mut out = vec![0u8; 32];
    argon
        .hash_password_into(secret.as_bytes(), salt, &mut out)
        .map_err(|e| ControlError::Kdf(e.to_string()))?;
    Ok(out)
}

/// An operator of the key authority.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operator {
    pub operator_id: OperatorId,
    pub credential: CredentialVerifier,
    pub active: bool,
}

/// Proof that one operator authenticated; inputs to [`ControlState::authorize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorSession {
    pub operator_id: OperatorId,
    pub authenticated_at: Timestamp,
}

/// Single-use approval bound to one operation and its exact parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApprovalToken {
    pub token_id: TokenId,
    pub operation_name: String,
    pub parameters_digest: [u8; 32],
    pub approvers: BTreeSet<OperatorId>,
    pub created_at: Timestamp,
    pub expires_at: Timestamp,
}

/// Which operations need two distinct operators.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ApprovalPolicy {
    pub dual_control: BTreeSet<String>,
}

impl ApprovalPolicy {
    pub fn required(&self, operation_name: &str) -> usize {
        if self.dual_control.contains(operation_name) {
            2
        } else {
            1
        }
    }

    pub fn with_dual(mut self, operation_name: &str) -> Self {
        self.dual_control.insert(operation_name.to_owned());
        self
    }
}

/// Operator registry plus token bookkeeping. Token issue/consume are
/// check-and-set against the used-token set, so at most one consume of a
/// token ever succeeds.
#[derive(Debug, Default)]
pub struct ControlState {
    operators: BTreeMap<OperatorId, Operator>,
    used_tokens: BTreeSet<TokenId>,
    /// Approval validity window, bounding how long "two operators are
    /// logged in" stays true. Default ten minutes.
    pub token_ttl_secs: i64,
}

pub const DEFAULT_TOKEN_TTL_SECS: i64 = 600;

impl ControlState {
    pub fn new() -> Self {
        ControlState {
            operators: BTreeMap::new(),
            used_tokens: BTreeSet::new(),
            token_ttl_secs: DEFAULT_TOKEN_TTL_SECS,
        }
    }

    pub fn add_operator(
        &mut self,
        operator_id: OperatorId,
        secret: &str,
        kdf: &KdfParams,
        rng: &mut dyn RngCore,
    ) -> Result<&Operator, ControlError> {
        if self.operators.contains_key(&operator_id) {
            return Err(ControlError::DuplicateOperator(operator_id));
        }
        let credential = CredentialVerifier::derive(secret, kdf, rng)?;
        self.operators.insert(
            operator_id.clone(),
            Operator {
                operator_id: operator_id.clone(),
                credential,
                active: true,
            },
        );
        Ok(&self.operators[&operator_id])
    }

    pub fn insert_operator_unchecked(&mut self, operator: Operator) {
        self.operators.insert(operator.operator_id.clone(), operator);
    }

    pub fn set_active(&mut self, operator_id: &OperatorId, active: bool) -> Result<(), ControlError> {
        let operator = self
            .operators
            .get_mut(operator_id)
            .ok_or_else(|| ControlError::UnknownOperator(operator_id.clone()))?;
        operator.active = active;
        Ok(())
    }

    pub fn operator(&self, id: &OperatorId) -> Option<&Operator> {
        self.operators.get(id)
    }

    pub fn operators(&self) -> impl Iterator<Item = &Operator> {
        self.operators.values()
    }

    pub fn has_operators(&self) -> bool {
        !self.operators.is_empty()
    }

    /// Verify an operator secret and open a session.
    pub fn authenticate(
        &self,
        operator_id: &OperatorId,
        secret: &str,
        now: Timestamp,
    ) -> Result<OperatorSession, ControlError> {
        let operator = self
            .operators
            .get(operator_id)
            .ok_or_else(|| ControlError::UnknownOperator(operator_id.clone()))?;
        if !operator.active {
            return Err(ControlError::OperatorInactive(operator_id.clone()));
        }
        if !operator.credential.matches(secret) {
            return Err(ControlError::AuthenticationFailed);
        }
        Ok(OperatorSession {
            operator_id: operator_id.clone(),
            authenticated_at: now,
        })
    }

    /// Issue an approval token when enough distinct, active operators back
    /// the operation under the policy.
    pub fn authorize(
        &self,
        operation_name: &str,
        parameters_digest: [u8; 32],
        sessions: &[OperatorSession],
        policy: &ApprovalPolicy,
        now: Timestamp,
        rng: &mut dyn RngCore,
    ) -> Result<ApprovalToken, ControlError> {
        let mut approvers = BTreeSet::new();
        for session in sessions {
            let operator = self
                .operators
                .get(&session.operator_id)
                .ok_or_else(|| ControlError::UnknownOperator(session.operator_id.clone()))?;
            if !operator.active {
                return Err(ControlError::OperatorInactive(session.operator_id.clone()));
            }
            approvers.insert(session.operator_id.clone());
        }
        let required = policy.required(operation_name);
        if approvers.len() < required {
            return Err(ControlError::DualControlRequired {
                required,
                distinct: approvers.len(),
            });
        }
        let mut id_bytes = [0u8; 12];
        rng.fill_bytes(&mut id_bytes);
        Ok(ApprovalToken {
            token_id: TokenId::new(format!("t-{}", hex::encode(id_bytes))),
            operation_name: operation_name.to_owned(),
            parameters_digest,
            approvers,
            created_at: now,
            expires_at: now.plus_secs(self.token_ttl_secs),
        })
    }

    /// Spend a token. Reuse, expiry and any mismatch of operation or
    /// parameters fail; a consumed token can never be consumed again.
    pub fn consume(
        &mut self,
        token: &ApprovalToken,
        operation_name: &str,
        parameters_digest: [u8; 32],
        now: Timestamp,
    ) -> Result<(), ControlError> {
        if token.operation_name != operation_name || token.parameters_digest != parameters_digest {
            return Err(ControlError::ParameterMismatch);
        }
        if now >= token.expires_at {
            return Err(ControlError::TokenExpired);
        }
        if !self.used_tokens.insert(token.token_id.clone()) {
            return Err(ControlError::TokenReused);
        }
        Ok(())
    }
}

/// One link of the audit chain. `record_hash` covers every other field,
/// `prev_hash` is the predecessor's `record_hash` (all zero for the first
/// record), and `seq` runs gaplessly from 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub operation_name: String,
    pub parameters_digest: Vec<u8>,
    pub operator_ids: Vec<OperatorId>,
    pub prev_hash: Vec<u8>,
    pub record_hash: Vec<u8>,
}

pub const GENESIS_PREV_HASH: [u8; 32] = [0u8; 32];

fn audit_body_doc(record: &AuditRecord) -> Value {
    DocBuilder::new()
        .text("operation", record.operation_name.clone())
        .list(
            "operators",
            record
                .operator_ids
                .iter()
                .map(|o| Value::text(o.as_str()))
                .collect(),
        )
        .bytes("parameters_digest", record.parameters_digest.clone())
        .bytes("prev_hash", record.prev_hash.clone())
        .int("seq", record.seq as i64)
        .int("timestamp", record.timestamp.as_secs())
        .build()
}

/// Hash covering every field of the record except `record_hash` itself.
pub fn audit_record_hash(record: &AuditRecord) -> Vec<u8> {
    Sha256::digest(canonical::encode(&audit_body_doc(record))).to_vec()
}

/// Build the next record of a chain.
pub fn make_audit_record(
    seq: u64,
    prev_hash: Vec<u8>,
    now: Timestamp,
    operation_name: &str,
    parameters_digest: [u8; 32],
    operator_ids: Vec<OperatorId>,
) -> AuditRecord {
    let mut record = AuditRecord {
        seq,
        timestamp: now,
        operation_name: operation_name.to_owned(),
        parameters_digest: parameters_digest.to_vec(),
        operator_ids,
        prev_hash,
        record_hash: Vec::new(),
    };
    record.record_hash = audit_record_hash(&record);
    record
}

/// Why verification stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditBreak {
    /// The record's hash does not cover its contents.
    HashMismatch,
    /// prev_hash does not equal the predecessor's record_hash.
    LinkBroken,
    /// seq is not the predecessor's seq + 1 (or 0 for the first record).
    SequenceGap,
    /// The log does not end at the registered head (truncation or a head
    /// left behind).
    HeadMismatch,
}

impl AuditBreak {
    pub fn name(self) -> &'static str {
        match self {
            AuditBreak::HashMismatch => "hash-mismatch",
            AuditBreak::LinkBroken => "link-broken",
            AuditBreak::SequenceGap => "sequence-gap",
            AuditBreak::HeadMismatch => "head-mismatch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuditVerdict {
    Valid { records: usize },
    Broken { at: u64, reason: AuditBreak },
}

impl AuditVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, AuditVerdict::Valid { .. })
    }
}

/// Recompute every hash and link of the chain, reporting the first broken
/// position. The reported `at` is the stored seq of the offending record
/// (for a deleted record, the successor that exposes the gap).
pub fn verify_audit_chain(records: &[AuditRecord]) -> AuditVerdict {
    let mut expected_prev: Vec<u8> = GENESIS_PREV_HASH.to_vec();
    for (i, record) in records.iter().enumerate() {
        if record.seq != i as u64 {
            return AuditVerdict::Broken {
                at: record.seq,
                reason: AuditBreak::SequenceGap,
            };
        }
        if record.prev_hash != expected_prev {
            return AuditVerdict::Broken {
                at: record.seq,
                reason: AuditBreak::LinkBroken,
            };
        }
        if record.record_hash != audit_record_hash(record) {
            return AuditVerdict::Broken {
                at: record.seq,
                reason: AuditBreak::HashMismatch,
            };
        }
        expected_prev = record.record_hash.clone();
    }
    AuditVerdict::Valid {
        records: records.len(),
    }
}

/// Digest of an operation's parameter document; binds tokens and audit
/// records to the exact parameters.
pub fn parameters_digest(params: &Value) -> [u8; 32] {
    canonical::digest(params)
}

/// Zeroize helper for secrets read from credential files.
pub fn wipe_string(mut s: String) {
    s.zeroize();
}
