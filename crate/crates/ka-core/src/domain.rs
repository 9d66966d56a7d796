//! Participants, issuers, key ownership and core-PKI membership.
//!
//! An issuer is a participant with exactly one distinguished name and, at
//! any instant, at most one valid certificate-issuing key (validity
//! intervals are half-open `[from, to)` and pairwise disjoint). Every
//! trust center product belongs to exactly one core PKI — the one of the
//! issuer that issued it. For any participant, key and instant, the key is
//! either the participant's own or foreign to them, never both.
//!
//! The [`Registry`] is the single-writer in-memory model; persistence
//! lives in `store`, authorization in `control`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{KeyId, ParticipantId, ProductId, Timestamp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("an issuer with this distinguished name already exists")]
    DuplicateDistinguishedName,
    #[error("invalid distinguished name: {0}")]
    InvalidDistinguishedName(String),
    #[error("key {0} is not owned by the issuer")]
    KeyNotOwnedByIssuer(KeyId),
    #[error("rollover at {effective} would overlap the current key (valid from {current_from})")]
    OverlapViolation {
        effective: Timestamp,
        current_from: Timestamp,
    },
    #[error("unknown key: {0}")]
    UnknownKey(KeyId),
    #[error("unknown participant: {0}")]
    UnknownParticipant(ParticipantId),
    #[error("unknown issuer: {0}")]
    UnknownIssuer(ParticipantId),
    #[error("unknown product: {0}")]
    UnknownProduct(ProductId),
    #[error("duplicate identifier: {0}")]
    DuplicateId(String),
}

/// Anyone dealing with trust center products. Issuers are participants
/// with `is_issuer` set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Participant {
    pub participant_id: ParticipantId,
    pub display_name: String,
    pub is_issuer: bool,
}

/// Validity window of one issuing key, half-open `[valid_from, valid_to)`;
/// `valid_to = None` means open-ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IssuingKeyWindow {
    pub key_id: KeyId,
    pub valid_from: Timestamp,
    pub valid_to: Option<Timestamp>,
}

impl IssuingKeyWindow {
    pub fn contains(&self, at: Timestamp) -> bool {
        self.valid_from <= at && self.valid_to.is_none_or(|to| at < to)
    }
}

/// A certificate issuer: exactly one distinguished name, at most one valid
/// issuing key at any instant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issuer {
    pub participant_id: ParticipantId,
    pub distinguished_name: String,
    pub issuing_keys: Vec<IssuingKeyWindow>,
}

impl Issuer {
    /// The unique issuing key valid at `at`, if any.
    pub fn valid_issuing_key(&self, at: Timestamp) -> Option<&KeyId> {
        self.issuing_keys
            .iter()
            .find(|w| w.contains(at))
            .map(|w| &w.key_id)
    }
}

/// Current ownership of a key. Each key has exactly one owner at a time;
/// the full record list is kept so ownership can be evaluated at any
/// instant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnershipRecord {
    pub owner: ParticipantId,
    pub since: Timestamp,
}

/// Registry view of one logical key: public metadata plus its ownership
/// history. Never holds private material.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRecord {
    pub key_id: KeyId,
    pub algorithm: String,
    pub public_part: Vec<u8>,
    pub created_at: Timestamp,
    pub exportable: bool,
    /// Chronological, non-empty after registration.
    pub ownership: Vec<OwnershipRecord>,
}

impl KeyRecord {
    pub fn owner_at(&self, at: Timestamp) -> Option<&ParticipantId> {
        self.ownership
            .iter()
            .rev()
            .find(|r| r.since <= at)
            .map(|r| &r.owner)
    }

    pub fn current_owner(&self) -> &ParticipantId {
        &self.ownership.last().expect("registered keys have an owner").owner
    }
}

/// Upper bound on distinguished-name length, in bytes.
pub const MAX_DN_BYTES: usize = 512;

/// Distinguished names are opaque validated labels: non-empty, at most
/// [`MAX_DN_BYTES`] bytes, no control characters. Normalized to NFC so
/// equality matches the canonical encoding.
pub fn validate_distinguished_name(dn: &str) -> Result<String, DomainError> {
    use unicode_normalization::UnicodeNormalization;
    let normalized: String = dn.nfc().collect();
    if normalized.is_empty() {
        return Err(DomainError::InvalidDistinguishedName("empty".into()));
    }
    if normalized.len() > MAX_DN_BYTES {
        return Err(DomainError::InvalidDistinguishedName(format!(
            "longer than {MAX_DN_BYTES} bytes"
        )));
    }
    if normalized.chars().any(|c| c.is_control()) {
        return Err(DomainError::InvalidDistinguishedName(
            "contains control characters".into(),
        ));
    }
    Ok(normalized)
}

/// In-memory registry of participants, issuers, keys and products.
/// Mutations are serialized behind `&mut self`; lookups are plain reads.
#[derive(Debug, Default)]
pub struct Registry {
    participants: BTreeMap<ParticipantId, Participant>,
    issuers: BTreeMap<ParticipantId, Issuer>,
    dn_index: BTreeMap<String, ParticipantId>,
    keys: BTreeMap<KeyId, KeyRecord>,
    products: BTreeMap<ProductId, ParticipantId>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn add_participant(
        &mut self,
        participant: Participant,
    ) -> Result<&Participant, DomainError> {
        let id = participant.participant_id.clone();
        if self.participants.contains_key(&id) {
            return Err(DomainError::DuplicateId(id.as_str().to_owned()));
        }
        self.participants.insert(id.clone(), participant);
        Ok(&self.participants[&id])
    }

    /// Create an issuer (and its participant) with a fresh distinguished
    /// name. The issuer starts with no issuing key.
    pub fn create_issuer(
        &mut self,
        participant_id: ParticipantId,
        dn: &str,
    ) -> Result<&Issuer, DomainError> {
        let dn = validate_distinguished_name(dn)?;
        if self.dn_index.contains_key(&dn) {
            return Err(DomainError::DuplicateDistinguishedName);
        }
        if self.participants.contains_key(&participant_id) {
            return Err(DomainError::DuplicateId(participant_id.as_str().to_owned()));
        }
        self.participants.insert(
            participant_id.clone(),
            Participant {
                participant_id: participant_id.clone(),
                display_name: dn.clone(),
                is_issuer: true,
            },
        );
        self.dn_index.insert(dn.clone(), participant_id.clone());
        self.issuers.insert(
            participant_id.clone(),
            Issuer {
                participant_id: participant_id.clone(),
                distinguished_name: dn,
                issuing_keys: Vec::new(),
            },
        );
        Ok(&self.issuers[&participant_id])
    }

    /// Restore an issuer from persistence without re-validating history.
    pub fn insert_issuer_unchecked(&mut self, issuer: Issuer) {
        self.dn_index
            .insert(issuer.distinguished_name.clone(), issuer.participant_id.clone());
        self.issuers.insert(issuer.participant_id.clone(), issuer);
    }

    /// Restore a key record from persistence.
    pub fn insert_key_unchecked(&mut self, record: KeyRecord) {
        self.keys.insert(record.key_id.clone(), record);
    }

    /// Restore a product registration from persistence.
    pub fn insert_product_unchecked(&mut self, product: ProductId, issuer: ParticipantId) {
        self.products.insert(product, issuer);
    }

    pub fn register_key(&mut self, record: KeyRecord) -> Result<(), DomainError> {
        if !self.participants.contains_key(record.current_owner()) {
            return Err(DomainError::UnknownParticipant(record.current_owner().clone()));
        }
        if self.keys.contains_key(&record.key_id) {
            return Err(DomainError::DuplicateId(record.key_id.as_str().to_owned()));
        }
        self.keys.insert(record.key_id.clone(), record);
        Ok(())
    }

    /// Close the current issuing key's window at `effective` and open the
    /// new key's window from there. The new key must already be registered
    /// to the issuer.
    pub fn rollover_issuing_key(
        &mut self,
        issuer_id: &ParticipantId,
        new_key_id: &KeyId,
        effective: Timestamp,
    ) -> Result<&Issuer, DomainError> {
        let owner = self
            .keys
            .get(new_key_id)
            .ok_or_else(|| DomainError::UnknownKey(new_key_id.clone()))?
            .current_owner()
            .clone();
        if owner != *issuer_id {
            return Err(DomainError::KeyNotOwnedByIssuer(new_key_id.clone()));
        }
        let issuer = self
            .issuers
            .get_mut(issuer_id)
            .ok_or_else(|| DomainError::UnknownIssuer(issuer_id.clone()))?;
        if let Some(current) = issuer.issuing_keys.last_mut() {
            if effective < current.valid_from {
                return Err(DomainError::OverlapViolation {
                    effective,
                    current_from: current.valid_from,
                });
            }
            if current.valid_to.is_none() {
                current.valid_to = Some(effective);
            } else if current.valid_to.is_some_and(|to| effective < to) {
                return Err(DomainError::OverlapViolation {
                    effective,
                    current_from: current.valid_from,
                });
            }
        }
        issuer.issuing_keys.push(IssuingKeyWindow {
            key_id: new_key_id.clone(),
            valid_from: effective,
            valid_to: None,
        });
        Ok(&self.issuers[issuer_id])
    }

    pub fn valid_issuing_key(
        &self,
        issuer_id: &ParticipantId,
        at: Timestamp,
    ) -> Result<Option<&KeyId>, DomainError> {
        let issuer = self
            .issuers
            .get(issuer_id)
            .ok_or_else(|| DomainError::UnknownIssuer(issuer_id.clone()))?;
        Ok(issuer.valid_issuing_key(at))
    }

    /// Own/foreign split: true iff `participant` owns `key_id` at `at`.
    /// Foreign is always the negation, so the two predicates partition
    /// every (participant, key, instant) triple.
    pub fn is_own_key(
        &self,
        participant: &ParticipantId,
        key_id: &KeyId,
        at: Timestamp,
    ) -> Result<bool, DomainError> {
        let record = self
            .keys
            .get(key_id)
            .ok_or_else(|| DomainError::UnknownKey(key_id.clone()))?;
        Ok(record.owner_at(at) == Some(participant))
    }

    pub fn is_foreign_key(
        &self,
        participant: &ParticipantId,
        key_id: &KeyId,
        at: Timestamp,
    ) -> Result<bool, DomainError> {
        self.is_own_key(participant, key_id, at).map(|own| !own)
    }

    /// Replace the key's ownership atomically. Transferring to the current
    /// owner is a recorded no-op (idempotent operator retries).
    pub fn transfer_ownership(
        &mut self,
        key_id: &KeyId,
        new_owner: &ParticipantId,
        now: Timestamp,
    ) -> Result<&OwnershipRecord, DomainError> {
        if !self.participants.contains_key(new_owner) {
            return Err(DomainError::UnknownParticipant(new_owner.clone()));
        }
        let record = self
            .keys
            .get_mut(key_id)
            .ok_or_else(|| DomainError::UnknownKey(key_id.clone()))?;
        if record.current_owner() != new_owner {
            record.ownership.push(OwnershipRecord {
                owner: new_owner.clone(),
                since: now,
            });
        }
        Ok(record.ownership.last().expect("non-empty after transfer"))
    }

    /// Record a product as issued by `issuer_id`, fixing its core PKI.
    pub fn register_product(
        &mut self,
        product: ProductId,
        issuer_id: &ParticipantId,
    ) -> Result<(), DomainError> {
        if !self.issuers.contains_key(issuer_id) {
            return Err(DomainError::UnknownIssuer(issuer_id.clone()));
        }
        self.products.insert(product, issuer_id.clone());
        Ok(())
    }

    /// The unique core PKI a product belongs to (the issuer that issued it).
    pub fn core_pki_of(&self, product: &ProductId) -> Result<&ParticipantId, DomainError> {
        self.products
            .get(product)
            .ok_or_else(|| DomainError::UnknownProduct(product.clone()))
    }

    pub fn participant(&self, id: &ParticipantId) -> Result<&Participant, DomainError> {
        self.participants
            .get(id)
            .ok_or_else(|| DomainError::UnknownParticipant(id.clone()))
    }

    pub fn issuer(&self, id: &ParticipantId) -> Result<&Issuer, DomainError> {
        self.issuers
            .get(id)
            .ok_or_else(|| DomainError::UnknownIssuer(id.clone()))
    }

    pub fn issuer_by_dn(&self, dn: &str) -> Option<&Issuer> {
        self.dn_index.get(dn).and_then(|id| self.issuers.get(id))
    }

    pub fn key(&self, id: &KeyId) -> Result<&KeyRecord, DomainError> {
        self.keys
            .get(id)
            .ok_or_else(|| DomainError::UnknownKey(id.clone()))
    }

    pub fn key_mut(&mut self, id: &KeyId) -> Result<&mut KeyRecord, DomainError> {
        self.keys
            .get_mut(id)
            .ok_or_else(|| DomainError::UnknownKey(id.clone()))
    }

    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        self.participants.values()
    }

    pub fn issuers(&self) -> impl Iterator<Item = &Issuer> {
        self.issuers.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &KeyRecord> {
        self.keys.values()
    }

    pub fn products(&self) -> impl Iterator<Item = (&ProductId, &ParticipantId)> {
        self.products.iter()
    }
}
