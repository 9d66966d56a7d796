//! Document schemas: the byte-exact field layout of every persisted (and
//! signed) object. Signatures are computed over the canonical encoding of
//! the signed-field subtree — the full document minus its `signature`
//! field — so builders here take an `include_signature` switch where it
//! matters.

use std::collections::BTreeSet;

use super::canonical::{CanonicalError, DocBuilder, Value};
use super::StoreError;
use crate::authority::{
    Certificate, Crl, CustodyBlob, DepositPurpose, DepositRecord, KeyAuthorityConfig, MasterRef,
    RevocationEntry,
};
use crate::control::{ApprovalPolicy, AuditRecord, CredentialVerifier, Operator};
use crate::crypto::{KdfParams, PassphrasePolicy, Pse, PseHeader};
use crate::domain::{Issuer, IssuingKeyWindow, KeyRecord, OwnershipRecord, Participant};
use crate::lifecycle::{HistoryEntry, KeyInstance, Origin, Transition};
use crate::types::{
    ActorId, ContainerId, DepositId, InstanceId, KeyId, OperatorId, ParticipantId, ProductId,
    Timestamp,
};

fn malformed(msg: impl Into<String>) -> StoreError {
    StoreError::Malformed(CanonicalError::MalformedDocument(msg.into()))
}

fn text(doc: &Value, key: &str) -> Result<String, StoreError> {
    Ok(doc
        .field(key)?
        .as_text()
        .ok_or_else(|| malformed(format!("field {key:?} is not text")))?
        .to_owned())
}

fn int(doc: &Value, key: &str) -> Result<i64, StoreError> {
    doc.field(key)?
        .as_int()
        .ok_or_else(|| malformed(format!("field {key:?} is not an integer")))
}

fn bytes(doc: &Value, key: &str) -> Result<Vec<u8>, StoreError> {
    Ok(doc
        .field(key)?
        .as_bytes()
        .ok_or_else(|| malformed(format!("field {key:?} is not bytes")))?
        .to_vec())
}

fn list<'doc>(doc: &'doc Value, key: &str) -> Result<&'doc [Value], StoreError> {
    doc.field(key)?
        .as_list()
        .ok_or_else(|| malformed(format!("field {key:?} is not a list")))
}

fn opt<'doc>(doc: &'doc Value, key: &str) -> Option<&'doc Value> {
    doc.as_map().and_then(|m| m.get(key))
}

fn text_list(items: &[Value], what: &str) -> Result<Vec<String>, StoreError> {
    items
        .iter()
        .map(|v| {
            v.as_text()
                .map(str::to_owned)
                .ok_or_else(|| malformed(format!("{what} entry is not text")))
        })
        .collect()
}

// --- kdf / passphrase policy -----------------------------------------------

pub fn kdf_doc(kdf: &KdfParams) -> Value {
    DocBuilder::new()
        .text("algorithm", kdf.algorithm.clone())
        .int("iterations", kdf.iterations as i64)
        .int("memory_kib", kdf.memory_kib as i64)
        .int("parallelism", kdf.parallelism as i64)
        .build()
}

pub fn kdf_from_doc(doc: &Value) -> Result<KdfParams, StoreError> {
    Ok(KdfParams {
        algorithm: text(doc, "algorithm")?,
        memory_kib: int(doc, "memory_kib")? as u32,
        iterations: int(doc, "iterations")? as u32,
        parallelism: int(doc, "parallelism")? as u32,
    })
}

fn passphrase_policy_doc(policy: &PassphrasePolicy) -> Value {
    DocBuilder::new()
        .text("alphabet", policy.alphabet.clone())
        .int("length", policy.length as i64)
        .int("min_entropy_bits", policy.min_entropy_bits as i64)
        .build()
}

fn passphrase_policy_from_doc(doc: &Value) -> Result<PassphrasePolicy, StoreError> {
    Ok(PassphrasePolicy {
        alphabet: text(doc, "alphabet")?,
        length: int(doc, "length")? as usize,
        min_entropy_bits: int(doc, "min_entropy_bits")? as f64,
    })
}

// --- participants / issuers --------------------------------------------------

pub fn participant_doc(p: &Participant) -> Value {
    DocBuilder::new()
        .text("display_name", p.display_name.clone())
        .int("is_issuer", p.is_issuer as i64)
        .text("participant_id", p.participant_id.as_str())
        .build()
}

pub fn participant_from_doc(doc: &Value) -> Result<Participant, StoreError> {
    Ok(Participant {
        participant_id: ParticipantId::new(text(doc, "participant_id")?),
        display_name: text(doc, "display_name")?,
        is_issuer: int(doc, "is_issuer")? != 0,
    })
}

fn revocation_doc(entry: &RevocationEntry) -> Value {
    DocBuilder::new()
        .text("reason", entry.reason.clone())
        .int("revoked_at", entry.revoked_at.as_secs())
        .int("serial", entry.serial as i64)
        .build()
}

fn revocation_from_doc(doc: &Value) -> Result<RevocationEntry, StoreError> {
    Ok(RevocationEntry {
        serial: int(doc, "serial")? as u64,
        revoked_at: Timestamp(int(doc, "revoked_at")?),
        reason: text(doc, "reason")?,
    })
}

/// Issuer record plus its authority-side bookkeeping (serial counter,
/// revocation set, product registry).
pub struct IssuerDocParts {
    pub issuer: Issuer,
    pub next_serial: u64,
    pub revocations: Vec<RevocationEntry>,
    pub products: Vec<ProductId>,
}

pub fn issuer_doc(parts: &IssuerDocParts) -> Value {
    let windows = parts
        .issuer
        .issuing_keys
        .iter()
        .map(|w| {
            let mut b = DocBuilder::new()
                .text("key_id", w.key_id.as_str())
                .int("valid_from", w.valid_from.as_secs());
            if let Some(to) = w.valid_to {
                b = b.int("valid_to", to.as_secs());
            }
            b.build()
        })
        .collect();
    DocBuilder::new()
        .text("distinguished_name", parts.issuer.distinguished_name.clone())
        .list("issuing_keys", windows)
        .int("next_serial", parts.next_serial as i64)
        .text("participant_id", parts.issuer.participant_id.as_str())
        .list(
            "products",
            parts.products.iter().map(|p| Value::text(p.as_str())).collect(),
        )
        .list("revocations", parts.revocations.iter().map(revocation_doc).collect())
        .build()
}

pub fn issuer_from_doc(doc: &Value) -> Result<IssuerDocParts, StoreError> {
    let mut issuing_keys = Vec::new();
    for w in list(doc, "issuing_keys")? {
        issuing_keys.push(IssuingKeyWindow {
            key_id: KeyId::new(text(w, "key_id")?),
            valid_from: Timestamp(int(w, "valid_from")?),
            valid_to: match opt(w, "valid_to") {
                Some(v) => Some(Timestamp(v.as_int().ok_or_else(|| {
                    malformed("valid_to is not an integer")
                })?)),
                None => None,
            },
        });
    }
    let revocations = list(doc, "revocations")?
        .iter()
        .map(revocation_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IssuerDocParts {
        issuer: Issuer {
            participant_id: ParticipantId::new(text(doc, "participant_id")?),
            distinguished_name: text(doc, "distinguished_name")?,
            issuing_keys,
        },
        next_serial: int(doc, "next_serial")? as u64,
        revocations,
        products: text_list(list(doc, "products")?, "products")?
            .into_iter()
            .map(ProductId::new)
            .collect(),
    })
}

// --- keys ---------------------------------------------------------------------

pub fn key_record_doc(key: &KeyRecord) -> Value {
    DocBuilder::new()
        .text("algorithm", key.algorithm.clone())
        .int("created_at", key.created_at.as_secs())
        .int("exportable", key.exportable as i64)
        .text("key_id", key.key_id.as_str())
        .list(
            "ownership",
            key.ownership
                .iter()
                .map(|o| {
                    DocBuilder::new()
                        .text("owner", o.owner.as_str())
                        .int("since", o.since.as_secs())
                        .build()
                })
                .collect(),
        )
        .bytes("public", key.public_part.clone())
        .build()
}

pub fn key_record_from_doc(doc: &Value) -> Result<KeyRecord, StoreError> {
    let mut ownership = Vec::new();
    for o in list(doc, "ownership")? {
        ownership.push(OwnershipRecord {
            owner: ParticipantId::new(text(o, "owner")?),
            since: Timestamp(int(o, "since")?),
        });
    }
    if ownership.is_empty() {
        return Err(malformed("key record without ownership"));
    }
    Ok(KeyRecord {
        key_id: KeyId::new(text(doc, "key_id")?),
        algorithm: text(doc, "algorithm")?,
        public_part: bytes(doc, "public")?,
        created_at: Timestamp(int(doc, "created_at")?),
        exportable: int(doc, "exportable")? != 0,
        ownership,
    })
}

// --- instances ------------------------------------------------------------------

fn origin_doc(origin: &Origin) -> Value {
    let mut b = DocBuilder::new();
    b = match origin {
        Origin::Generated => b.text("kind", "generated"),
        Origin::CopiedFrom(src) => b.text("kind", "copied").text("source", src.as_str()),
        Origin::RecoveredFrom(src) => b.text("kind", "recovered").text("source", src.as_str()),
    };
    b.build()
}

fn origin_from_doc(doc: &Value) -> Result<Origin, StoreError> {
    let kind = text(doc, "kind")?;
    match kind.as_str() {
        "generated" => Ok(Origin::Generated),
        "copied" => Ok(Origin::CopiedFrom(InstanceId::new(text(doc, "source")?))),
        "recovered" => Ok(Origin::RecoveredFrom(InstanceId::new(text(doc, "source")?))),
        other => Err(malformed(format!("unknown origin kind {other:?}"))),
    }
}

/// Instance histories are persisted as event lists, never materialized
/// states; replay on load is the arbiter of the stored history.
pub fn instance_doc(instance: &KeyInstance, custody: Option<&CustodyBlob>) -> Value {
    let history = instance
        .history()
        .iter()
        .map(|e| {
            DocBuilder::new()
                .text("actor", e.actor.as_str())
                .int("at", e.at.as_secs())
                .text("transition", e.transition.name())
                .build()
        })
        .collect();
    let mut b = DocBuilder::new()
        .list("history", history)
        .text("instance_id", instance.instance_id().as_str())
        .text("key_id", instance.key_id().as_str())
        .value("origin", origin_doc(instance.origin()));
    if let Some(custody) = custody {
        b = b.value(
            "custody",
            DocBuilder::new()
                .bytes("nonce", custody.nonce.clone())
                .bytes("sealed", custody.sealed.clone())
                .build(),
        );
    }
    b.build()
}

pub struct InstanceDocParts {
    pub instance_id: InstanceId,
    pub key_id: KeyId,
    pub origin: Origin,
    pub history: Vec<HistoryEntry>,
    pub custody: Option<CustodyBlob>,
}

pub fn instance_from_doc(doc: &Value) -> Result<InstanceDocParts, StoreError> {
    let mut history = Vec::new();
    for e in list(doc, "history")? {
        let name = text(e, "transition")?;
        history.push(HistoryEntry {
            transition: Transition::from_name(&name)
                .ok_or_else(|| malformed(format!("unknown transition {name:?}")))?,
            at: Timestamp(int(e, "at")?),
            actor: ActorId::new(text(e, "actor")?),
        });
    }
    let custody = match opt(doc, "custody") {
        Some(c) => Some(CustodyBlob {
            nonce: bytes(c, "nonce")?,
            sealed: bytes(c, "sealed")?,
        }),
        None => None,
    };
    Ok(InstanceDocParts {
        instance_id: InstanceId::new(text(doc, "instance_id")?),
        key_id: KeyId::new(text(doc, "key_id")?),
        origin: origin_from_doc(doc.field("origin")?)?,
        history,
        custody,
    })
}

// --- deposits ---------------------------------------------------------------------

pub fn deposit_purpose_name(p: DepositPurpose) -> &'static str {
    match p {
        DepositPurpose::Backup => "backup",
        DepositPurpose::Archive => "archive",
        DepositPurpose::Escrow => "escrow",
    }
}

pub fn deposit_purpose_from_name(name: &str) -> Option<DepositPurpose> {
    match name {
        "backup" => Some(DepositPurpose::Backup),
        "archive" => Some(DepositPurpose::Archive),
        "escrow" => Some(DepositPurpose::Escrow),
        _ => None,
    }
}

pub fn deposit_doc(d: &DepositRecord) -> Value {
    DocBuilder::new()
        .text("deposit_id", d.deposit_id.as_str())
        .int("deposited_at", d.deposited_at.as_secs())
        .text("key_id", d.key_id.as_str())
        .bytes("nonce", d.nonce.clone())
        .text("purpose", deposit_purpose_name(d.purpose))
        .text("source_instance", d.source_instance.as_str())
        .bytes("wrapped", d.wrapped_private_key.clone())
        .build()
}

pub fn deposit_from_doc(doc: &Value) -> Result<DepositRecord, StoreError> {
    let purpose_name = text(doc, "purpose")?;
    Ok(DepositRecord {
        deposit_id: DepositId::new(text(doc, "deposit_id")?),
        key_id: KeyId::new(text(doc, "key_id")?),
        source_instance: InstanceId::new(text(doc, "source_instance")?),
        purpose: deposit_purpose_from_name(&purpose_name)
            .ok_or_else(|| malformed(format!("unknown deposit purpose {purpose_name:?}")))?,
        deposited_at: Timestamp(int(doc, "deposited_at")?),
        nonce: bytes(doc, "nonce")?,
        wrapped_private_key: bytes(doc, "wrapped")?,
    })
}

// --- certificates / CRLs --------------------------------------------------------------

/// Certificate document; the signed subtree is this document without the
/// `signature` field.
pub fn certificate_doc(cert: &Certificate, include_signature: bool) -> Value {
    let mut b = DocBuilder::new()
        .text("issuer_dn", cert.issuer_dn.clone())
        .text("issuer_id", cert.issuer_id.as_str())
        .list(
            "key_usage",
            cert.key_usage.iter().map(Value::text).collect(),
        )
        .int("serial", cert.serial as i64)
        .text("signing_key_id", cert.signing_key_id.as_str())
        .text("subject_dn", cert.subject_dn.clone())
        .text("subject_key_algorithm", cert.subject_key_algorithm.clone())
        .bytes("subject_public_key", cert.subject_public_key.clone())
        .int("valid_from", cert.valid_from.as_secs())
        .int("valid_to", cert.valid_to.as_secs());
    if include_signature {
        b = b.bytes("signature", cert.signature.clone());
    }
    b.build()
}

pub fn certificate_from_doc(doc: &Value) -> Result<Certificate, StoreError> {
    Ok(Certificate {
        serial: int(doc, "serial")? as u64,
        issuer_dn: text(doc, "issuer_dn")?,
        issuer_id: ParticipantId::new(text(doc, "issuer_id")?),
        subject_dn: text(doc, "subject_dn")?,
        subject_key_algorithm: text(doc, "subject_key_algorithm")?,
        subject_public_key: bytes(doc, "subject_public_key")?,
        valid_from: Timestamp(int(doc, "valid_from")?),
        valid_to: Timestamp(int(doc, "valid_to")?),
        key_usage: text_list(list(doc, "key_usage")?, "key_usage")?
            .into_iter()
            .collect::<BTreeSet<String>>(),
        signing_key_id: KeyId::new(text(doc, "signing_key_id")?),
        signature: bytes(doc, "signature")?,
    })
}

pub fn crl_doc(crl: &Crl, include_signature: bool) -> Value {
    let mut b = DocBuilder::new()
        .list("entries", crl.entries.iter().map(revocation_doc).collect())
        .text("issuer_dn", crl.issuer_dn.clone())
        .text("issuer_id", crl.issuer_id.as_str())
        .int("next_update", crl.next_update.as_secs())
        .text("signing_key_id", crl.signing_key_id.as_str())
        .int("this_update", crl.this_update.as_secs());
    if include_signature {
        b = b.bytes("signature", crl.signature.clone());
    }
    b.build()
}

pub fn crl_from_doc(doc: &Value) -> Result<Crl, StoreError> {
    Ok(Crl {
        issuer_dn: text(doc, "issuer_dn")?,
        issuer_id: ParticipantId::new(text(doc, "issuer_id")?),
        this_update: Timestamp(int(doc, "this_update")?),
        next_update: Timestamp(int(doc, "next_update")?),
        entries: list(doc, "entries")?
            .iter()
            .map(revocation_from_doc)
            .collect::<Result<Vec<_>, _>>()?,
        signing_key_id: KeyId::new(text(doc, "signing_key_id")?),
        signature: bytes(doc, "signature")?,
    })
}

// --- PSE containers ---------------------------------------------------------------------

fn pse_header_doc(header: &PseHeader) -> Value {
    DocBuilder::new()
        .text("cipher", header.cipher.clone())
        .value("kdf", kdf_doc(&header.kdf))
        .bytes("nonce", header.nonce.clone())
        .bytes("salt", header.salt.clone())
        .build()
}

fn pse_header_from_doc(doc: &Value) -> Result<PseHeader, StoreError> {
    Ok(PseHeader {
        kdf: kdf_from_doc(doc.field("kdf")?)?,
        cipher: text(doc, "cipher")?,
        salt: bytes(doc, "salt")?,
        nonce: bytes(doc, "nonce")?,
    })
}

/// `instance_id` ties the container to the key instance it carries; that
/// link is repository metadata, the cryptographic binding is the header's
/// aad.
pub fn pse_doc(pse: &Pse, instance_id: &InstanceId) -> Value {
    DocBuilder::new()
        .text("container_id", pse.container_id.as_str())
        .value("header", pse_header_doc(&pse.header))
        .text("instance_id", instance_id.as_str())
        .bytes("sealed", pse.sealed_payload.clone())
        .text("subject", pse.subject.as_str())
        .build()
}

pub fn pse_from_doc(doc: &Value) -> Result<(Pse, InstanceId), StoreError> {
    Ok((
        Pse {
            container_id: ContainerId::new(text(doc, "container_id")?),
            subject: ParticipantId::new(text(doc, "subject")?),
            header: pse_header_from_doc(doc.field("header")?)?,
            sealed_payload: bytes(doc, "sealed")?,
        },
        InstanceId::new(text(doc, "instance_id")?),
    ))
}

// --- operators ---------------------------------------------------------------------------

pub fn operator_doc(op: &Operator) -> Value {
    DocBuilder::new()
        .int("active", op.active as i64)
        .value(
            "credential",
            DocBuilder::new()
                .bytes("hash", op.credential.hash.clone())
                .value("kdf", kdf_doc(&op.credential.kdf))
                .bytes("salt", op.credential.salt.clone())
                .build(),
        )
        .text("operator_id", op.operator_id.as_str())
        .build()
}

pub fn operator_from_doc(doc: &Value) -> Result<Operator, StoreError> {
    let cred = doc.field("credential")?;
    Ok(Operator {
        operator_id: OperatorId::new(text(doc, "operator_id")?),
        credential: CredentialVerifier {
            kdf: kdf_from_doc(cred.field("kdf")?)?,
            salt: bytes(cred, "salt")?,
            hash: bytes(cred, "hash")?,
        },
        active: int(doc, "active")? != 0,
    })
}

// --- audit records -------------------------------------------------------------------------

pub fn audit_record_doc(record: &AuditRecord) -> Value {
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
        .bytes("record_hash", record.record_hash.clone())
        .int("seq", record.seq as i64)
        .int("timestamp", record.timestamp.as_secs())
        .build()
}

pub fn audit_record_from_doc(doc: &Value) -> Result<AuditRecord, StoreError> {
    Ok(AuditRecord {
        seq: int(doc, "seq")? as u64,
        timestamp: Timestamp(int(doc, "timestamp")?),
        operation_name: text(doc, "operation")?,
        parameters_digest: bytes(doc, "parameters_digest")?,
        operator_ids: text_list(list(doc, "operators")?, "operators")?
            .into_iter()
            .map(OperatorId::new)
            .collect(),
        prev_hash: bytes(doc, "prev_hash")?,
        record_hash: bytes(doc, "record_hash")?,
    })
}

// --- authority config -------------------------------------------------------------------------

pub fn config_doc(config: &KeyAuthorityConfig) -> Value {
    let mut b = DocBuilder::new()
        .int("approval_ttl_secs", config.approval_ttl_secs)
        .int("audit_count", config.audit_count as i64)
        .bytes("audit_head", config.audit_head.clone())
        .text("authority_id", config.authority_id.clone())
        .list(
            "dual_control",
            config
                .dual_control_policy
                .dual_control
                .iter()
                .map(Value::text)
                .collect(),
        )
        .list(
            "hosted_core_authorities",
            config
                .hosted_core_authorities
                .iter()
                .map(|i| Value::text(i.as_str()))
                .collect(),
        )
        .value("kdf", kdf_doc(&config.kdf))
        .int("offline_mode", config.offline_mode as i64)
        .value("passphrase_policy", passphrase_policy_doc(&config.passphrase_policy));
    if let Some(master) = &config.master {
        b = b.value(
            "master",
            DocBuilder::new()
                .text("container_id", master.container_id.as_str())
                .text("instance_id", master.instance_id.as_str())
                .text("key_id", master.key_id.as_str())
                .build(),
        );
    }
    b.build()
}

pub fn config_from_doc(doc: &Value) -> Result<KeyAuthorityConfig, StoreError> {
    let master = match opt(doc, "master") {
        Some(m) => Some(MasterRef {
            key_id: KeyId::new(text(m, "key_id")?),
            instance_id: InstanceId::new(text(m, "instance_id")?),
            container_id: ContainerId::new(text(m, "container_id")?),
        }),
        None => None,
    };
    Ok(KeyAuthorityConfig {
        authority_id: text(doc, "authority_id")?,
        hosted_core_authorities: text_list(list(doc, "hosted_core_authorities")?, "hosted")?
            .into_iter()
            .map(ParticipantId::new)
            .collect(),
        offline_mode: int(doc, "offline_mode")? != 0,
        dual_control_policy: ApprovalPolicy {
            dual_control: text_list(list(doc, "dual_control")?, "dual_control")?
                .into_iter()
                .collect(),
        },
        kdf: kdf_from_doc(doc.field("kdf")?)?,
        passphrase_policy: passphrase_policy_from_doc(doc.field("passphrase_policy")?)?,
        approval_ttl_secs: int(doc, "approval_ttl_secs")?,
        master,
        audit_count: int(doc, "audit_count")? as u64,
        audit_head: bytes(doc, "audit_head")?,
    })
}
