//! Key authority engine for hierarchical PKIs.
//!
//! Every physical instance of a private key is driven through an explicit
//! life-cycle state machine; all tasks that require or enable access to an
//! issuer's own private keys or to foreign private keys (issuing, revocation,
//! key generation, personalization, escrow/recovery, copying, destruction)
//! run inside one module — the [`authority::KeyAuthority`] — under
//! dual-control approval and a hash-chained audit log.
//!
//! Module map:
//! - [`lifecycle`] — the per-instance finite state machine (pure, no I/O).
//! - [`domain`] — participants, issuers, ownership, core-PKI membership.
//! - [`crypto`] — provider-backed key generation, signing, PSE sealing,
//!   passphrase generation and key wiping.
//! - [`control`] — operator authentication, dual-control approval tokens,
//!   tamper-evident audit records.
//! - [`store`] — canonical byte-exact serialization and the on-disk
//!   repository layout.
//! - [`authority`] — the key authority itself, composing all of the above.

pub mod authority;
pub mod control;
pub mod crypto;
pub mod domain;
pub mod lifecycle;
pub mod store;
pub mod types;
