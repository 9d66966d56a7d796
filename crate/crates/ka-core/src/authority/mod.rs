//! The key authority: the one module through which every task requiring
//! access to issuer private keys or foreign private keys runs.
//!
//! A [`KeyAuthority`] hosts one core key authority per issuer and executes
//! issuing, revocation, purpose signing, key generation, personalization,
//! delivery, escrow/recovery, copying, ownership transfer and destruction,
//! composing the lifecycle state machine, the domain registry, the crypto
//! provider, dual-control approvals and the audit chain.
//!
//! Custody model: the authority's master key is generated at `init`,
//! sealed into a PSE under a passphrase revealed exactly once, and driven
//! through the ordinary lifecycle (generate → store → deliver → usable).
//! Any private material the authority holds at rest — issuer issuing keys,
//! purpose keys, keys awaiting personalization — is wrapped under keys
//! derived from the master secret; deposits are wrapped the same way.
//! Plaintext key bytes never reach the repository.
//!
//! Every privileged operation follows the same shape: validate, authorize
//! (single- or dual-control, parameter-bound token, consumed on the spot),
//! append one audit record (flushed before effects), then apply and
//! persist. The canonical operation names in [`op`] double as the policy
//! and audit vocabulary.

pub mod chain;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use zeroize::Zeroize;

use crate::control::{
    self, ApprovalPolicy, AuditRecord, AuditVerdict, ControlError, ControlState, OperatorSession,
};
use crate::crypto::{
    self, CryptoError, CryptoProvider, KdfParams, KeyMaterial, Passphrase, PassphrasePolicy, Pse,
    SecretBytes, SoftwareProvider, ALG_ED25519,
};
use crate::domain::{
    DomainError, Issuer, KeyRecord, OwnershipRecord, Participant, Registry,
};
use crate::lifecycle::{KeyInstance, LifecycleError, LifecycleState, Transition};
use crate::store::canonical::{DocBuilder, Value};
use crate::store::{docs, Kind, Repository, StoreError};
use crate::types::{
    ActorId, Clock, ContainerId, DepositId, InstanceId, KeyId, OperatorId, ParticipantId,
    ProductId, Timestamp,
};

pub use chain::{ChainEnv, ChainFailure, ChainVerdict, TrustAnchor};

/// Canonical operation names: the audit vocabulary and the dual-control
/// policy keys.
pub mod op {
    pub const INIT: &str = "init";
    pub const OPERATOR_ADD: &str = "operator_add";
    pub const ISSUER_CREATE: &str = "issuer_create";
    pub const PARTICIPANT_ADD: &str = "participant_add";
    pub const GENERATE_PARTICIPANT_KEYS: &str = "generate_participant_keys";
    pub const ROLLOVER_ISSUING_KEY: &str = "rollover_issuing_key";
    pub const ISSUE_CERTIFICATE: &str = "issue_certificate";
    pub const ISSUE_CROSS_CERTIFICATE: &str = "issue_cross_certificate";
    pub const REVOKE: &str = "revoke";
    pub const PUBLISH_CRL: &str = "publish_crl";
    pub const SIGN_FOR_PURPOSE: &str = "sign_for_purpose";
    pub const PERSONALIZE: &str = "personalize";
    pub const RECORD_DELIVERY: &str = "record_delivery";
    pub const DEPOSIT_KEY: &str = "deposit_key";
    pub const RECOVER_KEY: &str = "recover_key";
    pub const COPY_KEY: &str = "copy_key";
    pub const DESTROY_KEY: &str = "destroy_key";
    pub const TRANSFER_OWNERSHIP: &str = "transfer_ownership";
    pub const HOLD_IN_CUSTODY: &str = "hold_in_custody";
}

/// Operations requiring two distinct operators by default. Any operation
/// targeting the master key instance is escalated to dual control as well.
pub fn default_dual_control() -> ApprovalPolicy {
    ApprovalPolicy::default()
        .with_dual(op::RECOVER_KEY)
        .with_dual(op::COPY_KEY)
        .with_dual(op::TRANSFER_OWNERSHIP)
        .with_dual(op::ROLLOVER_ISSUING_KEY)
        .with_dual(op::DESTROY_KEY)
}

#[derive(Debug, Error)]
pub enum AuthorityError {
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("issuer {0} has no valid issuing key")]
    NoValidIssuingKey(ParticipantId),
    #[error("unknown subject: {0}")]
    UnknownSubject(ParticipantId),
    #[error("an issuer cannot cross-certify itself")]
    SelfCrossCert,
    #[error("no certificate with serial {0} under this issuer")]
    UnknownSerial(u64),
    #[error("certificate {0} is already revoked")]
    AlreadyRevoked(u64),
    #[error("subject {subject} does not own the key of instance {instance}")]
    NotOwner {
        instance: InstanceId,
        subject: ParticipantId,
    },
    #[error("recipient {recipient} is not the owner of the key of instance {instance}")]
    RecipientNotOwner {
        instance: InstanceId,
        recipient: ParticipantId,
    },
    #[error("unknown deposit: {0}")]
    UnknownDeposit(DepositId),
    #[error("deposit unwrap failed (master key mismatch or tampering)")]
    UnwrapFailed,
    #[error("the holding token forbids exporting this instance's private part")]
    ExportForbidden,
    #[error("unknown instance: {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown certificate: {0}")]
    UnknownCertificate(String),
    #[error("master key is not unsealed; provide the master passphrase")]
    MasterKeyUnavailable,
}

impl AuthorityError {
    /// Stable machine-readable label, the CLI's error vocabulary.
    pub fn label(&self) -> &'static str {
        match self {
            AuthorityError::Lifecycle(e) => match e {
                LifecycleError::IllegalTransition { .. } => "IllegalTransition",
                LifecycleError::InstanceRetired => "InstanceRetired",
                LifecycleError::SourceNotCopyable(_) => "SourceNotCopyable",
                LifecycleError::SourceNotDeposited(_) => "SourceNotDeposited",
                LifecycleError::SourceRetired => "SourceRetired",
            },
            AuthorityError::Domain(e) => match e {
                DomainError::DuplicateDistinguishedName => "DuplicateDistinguishedName",
                DomainError::InvalidDistinguishedName(_) => "InvalidDistinguishedName",
                DomainError::KeyNotOwnedByIssuer(_) => "KeyNotOwnedByIssuer",
                DomainError::OverlapViolation { .. } => "OverlapViolation",
                DomainError::UnknownKey(_) => "UnknownKey",
                DomainError::UnknownParticipant(_) => "UnknownParticipant",
                DomainError::UnknownIssuer(_) => "UnknownIssuer",
                DomainError::UnknownProduct(_) => "UnknownProduct",
                DomainError::DuplicateId(_) => "DuplicateId",
            },
            AuthorityError::Crypto(e) => match e {
                CryptoError::UnsupportedAlgorithm(_) => "UnsupportedAlgorithm",
                CryptoError::WeakParameters { .. } => "WeakParameters",
                CryptoError::RngFailure => "RngFailure",
                CryptoError::PrivateKeyUnavailable => "PrivateKeyUnavailable",
                CryptoError::PolicyTooWeak { .. } => "PolicyTooWeak",
                CryptoError::AuthenticationFailed => "AuthenticationFailed",
                CryptoError::MalformedContainer(_) => "MalformedContainer",
            },
            AuthorityError::Control(e) => match e {
                ControlError::DualControlRequired { .. } => "DualControlRequired",
                ControlError::OperatorInactive(_) => "OperatorInactive",
                ControlError::UnknownOperator(_) => "UnknownOperator",
                ControlError::AuthenticationFailed => "AuthenticationFailed",
                ControlError::TokenExpired => "TokenExpired",
                ControlError::TokenReused => "TokenReused",
                ControlError::ParameterMismatch => "ParameterMismatch",
                ControlError::DuplicateOperator(_) => "DuplicateOperator",
                ControlError::Kdf(_) => "KdfFailure",
            },
            AuthorityError::Store(e) => match e {
                StoreError::NotFound { .. } => "NotFound",
                StoreError::StorageCorrupt { .. } => "StorageCorrupt",
                StoreError::Malformed(_) => "MalformedDocument",
                StoreError::InvalidId(_) => "InvalidId",
                StoreError::AlreadyExists(_) => "RepositoryExists",
                StoreError::NoRepository(_) => "NoRepository",
                StoreError::Io(_) => "IoError",
            },
            AuthorityError::NoValidIssuingKey(_) => "NoValidIssuingKey",
            AuthorityError::UnknownSubject(_) => "UnknownSubject",
            AuthorityError::SelfCrossCert => "SelfCrossCert",
            AuthorityError::UnknownSerial(_) => "UnknownSerial",
            AuthorityError::AlreadyRevoked(_) => "AlreadyRevoked",
            AuthorityError::NotOwner { .. } => "NotOwner",
            AuthorityError::RecipientNotOwner { .. } => "RecipientNotOwner",
            AuthorityError::UnknownDeposit(_) => "UnknownDeposit",
            AuthorityError::UnwrapFailed => "UnwrapFailed",
            AuthorityError::ExportForbidden => "ExportForbidden",
            AuthorityError::UnknownInstance(_) => "UnknownInstance",
            AuthorityError::UnknownCertificate(_) => "UnknownCertificate",
            AuthorityError::MasterKeyUnavailable => "MasterKeyUnavailable",
        }
    }
}

type Result<T> = std::result::Result<T, AuthorityError>;

/// A signed binding of a subject name and public key to an issuer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub serial: u64,
    pub issuer_dn: String,
    pub issuer_id: ParticipantId,
    pub subject_dn: String,
    pub subject_key_algorithm: String,
    pub subject_public_key: Vec<u8>,
    pub valid_from: Timestamp,
    pub valid_to: Timestamp,
    pub key_usage: BTreeSet<String>,
    pub signing_key_id: KeyId,
    pub signature: Vec<u8>,
}

impl Certificate {
    pub fn id(&self) -> String {
        format!("{}-{}", self.issuer_id, self.serial)
    }

    /// Canonical bytes the signature covers (the document minus the
    /// signature field).
    pub fn signed_bytes(&self) -> Vec<u8> {
        crate::store::canonical::encode(&docs::certificate_doc(self, false))
    }
}

/// One revoked serial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevocationEntry {
    pub serial: u64,
    pub revoked_at: Timestamp,
    pub reason: String,
}

/// A full (non-delta) certificate revocation list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crl {
    pub issuer_dn: String,
    pub issuer_id: ParticipantId,
    pub this_update: Timestamp,
    pub next_update: Timestamp,
    pub entries: Vec<RevocationEntry>,
    pub signing_key_id: KeyId,
    pub signature: Vec<u8>,
}

impl Crl {
    pub fn signed_bytes(&self) -> Vec<u8> {
        crate::store::canonical::encode(&docs::crl_doc(self, false))
    }

    pub fn contains(&self, serial: u64) -> bool {
        self.entries.iter().any(|e| e.serial == serial)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepositPurpose {
    Backup,
    Archive,
    Escrow,
}

/// An escrowed private key, wrapped under the authority master key. The
/// wrapped form opens only with the master secret plus dual-control
/// approval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepositRecord {
    pub deposit_id: DepositId,
    pub key_id: KeyId,
    pub source_instance: InstanceId,
    pub purpose: DepositPurpose,
    pub deposited_at: Timestamp,
    pub nonce: Vec<u8>,
    pub wrapped_private_key: Vec<u8>,
}

/// Wrapped private material the authority itself holds for an instance
/// (issuer keys in service, keys awaiting personalization or deposit).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CustodyBlob {
    pub nonce: Vec<u8>,
    pub sealed: Vec<u8>,
}

/// Where the master key lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MasterRef {
    pub key_id: KeyId,
    pub instance_id: InstanceId,
    pub container_id: ContainerId,
}

/// Persisted authority configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyAuthorityConfig {
    pub authority_id: String,
    pub hosted_core_authorities: BTreeSet<ParticipantId>,
    /// Organizational measure; all interfaces are local either way, so
    /// this flag is recorded and reported but gates nothing.
    pub offline_mode: bool,
    pub dual_control_policy: ApprovalPolicy,
    pub kdf: KdfParams,
    pub passphrase_policy: PassphrasePolicy,
    pub approval_ttl_secs: i64,
    pub master: Option<MasterRef>,
    pub audit_count: u64,
    pub audit_head: Vec<u8>,
}

/// Knobs for `init`.
pub struct AuthorityOptions {
    pub authority_id: String,
    pub kdf: KdfParams,
    pub passphrase_policy: PassphrasePolicy,
    pub approval_ttl_secs: i64,
    pub offline_mode: bool,
    /// fsync writes. Scripted runs may disable for speed.
    pub durable: bool,
    /// Seed for the authority's randomness; `None` draws from the OS.
    pub rng_seed: Option<[u8; 32]>,
}

impl Default for AuthorityOptions {
    fn default() -> Self {
        AuthorityOptions {
            authority_id: "ka".to_owned(),
            kdf: KdfParams::default(),
            passphrase_policy: PassphrasePolicy::default(),
            approval_ttl_secs: control::DEFAULT_TOKEN_TTL_SECS,
            offline_mode: true,
            durable: true,
            rng_seed: None,
        }
    }
}

/// What `init` hands the operator exactly once.
pub struct InitReceipt {
    pub master_passphrase: Passphrase,
    pub master: MasterRef,
}

const AUTHORITY_PARTICIPANT: &str = "authority";
const CHANNEL_AUTHORITY_CUSTODY: &str = "authority-custody";

/// The key authority engine. One instance per repository; mutations are
/// serialized behind `&mut self` (the CLI adds a repository lock across
/// processes).
pub struct KeyAuthority {
    repo: Repository,
    config: KeyAuthorityConfig,
    registry: Registry,
    instances: BTreeMap<InstanceId, KeyInstance>,
    custody: BTreeMap<InstanceId, CustodyBlob>,
    deposits: BTreeMap<DepositId, DepositRecord>,
    certs: BTreeMap<String, Certificate>,
    crls: BTreeMap<ParticipantId, Crl>,
    revocations: BTreeMap<ParticipantId, BTreeMap<u64, RevocationEntry>>,
    next_serial: BTreeMap<ParticipantId, u64>,
    pses: BTreeMap<ContainerId, (Pse, InstanceId)>,
    control: ControlState,
    clock: Arc<dyn Clock>,
    provider: Box<dyn CryptoProvider>,
    rng: ChaCha20Rng,
    master_secret: Option<SecretBytes>,
    /// (operation, key) for every private-part read; reads of issuer or
    /// foreign keys must map onto audited operations.
    private_read_log: Vec<(String, KeyId)>,
}

impl KeyAuthority {
    /// Create a fresh repository and authority: the authority participant,
    /// the master key (sealed into a PSE under a one-time passphrase) and
    /// the genesis audit record.
    pub fn init(
        root: impl AsRef<Path>,
        options: AuthorityOptions,
        clock: Arc<dyn Clock>,
    ) -> Result<(KeyAuthority, InitReceipt)> {
        let mut repo = Repository::create(root.as_ref())?;
        repo.set_durable(options.durable);
        let rng = match options.rng_seed {
            Some(seed) => ChaCha20Rng::from_seed(seed),
            None => ChaCha20Rng::from_rng(rand::rngs::OsRng)
                .map_err(|_| CryptoError::RngFailure)?,
        };
        let mut control = ControlState::new();
        control.token_ttl_secs = options.approval_ttl_secs;
        let config = KeyAuthorityConfig {
            authority_id: options.authority_id,
            hosted_core_authorities: BTreeSet::new(),
            offline_mode: options.offline_mode,
            dual_control_policy: default_dual_control(),
            kdf: options.kdf,
            passphrase_policy: options.passphrase_policy,
            approval_ttl_secs: options.approval_ttl_secs,
            master: None,
            audit_count: 0,
            audit_head: control::GENESIS_PREV_HASH.to_vec(),
        };
        let mut authority = KeyAuthority {
            repo,
            config,
            registry: Registry::new(),
            instances: BTreeMap::new(),
            custody: BTreeMap::new(),
            deposits: BTreeMap::new(),
            certs: BTreeMap::new(),
            crls: BTreeMap::new(),
            revocations: BTreeMap::new(),
            next_serial: BTreeMap::new(),
            pses: BTreeMap::new(),
            control,
            clock,
            provider: Box::new(SoftwareProvider::default()),
            rng,
            master_secret: None,
            private_read_log: Vec::new(),
        };

        crypto::rng_health_check(&mut authority.rng)?;
        let now = authority.clock.now();

        // The authority is itself a participant; its master key eats the
        // same lifecycle as every other key.
        authority.registry.add_participant(Participant {
            participant_id: ParticipantId::new(AUTHORITY_PARTICIPANT),
            display_name: "Key Authority".to_owned(),
            is_issuer: false,
        })?;
        authority.save_participant(&ParticipantId::new(AUTHORITY_PARTICIPANT))?;

        let master_key_id = authority.fresh_id::<KeyId>("k");
        let mut material = authority.provider.generate_keypair(
            master_key_id.clone(),
            ALG_ED25519,
            &mut authority.rng,
            now,
        )?;
        authority.registry.register_key(KeyRecord {
            key_id: master_key_id.clone(),
            algorithm: material.algorithm.clone(),
            public_part: material.public_part.clone(),
            created_at: now,
            exportable: false,
            ownership: vec![OwnershipRecord {
                owner: ParticipantId::new(AUTHORITY_PARTICIPANT),
                since: now,
            }],
        })?;

        let instance_id = authority.fresh_id::<InstanceId>("x");
        let mut instance = KeyInstance::generate(
            instance_id.clone(),
            master_key_id.clone(),
            ActorId::new(AUTHORITY_PARTICIPANT),
            now,
        );

        let passphrase =
            crypto::generate_passphrase(&authority.config.passphrase_policy, &mut authority.rng)?;
        let container_id = authority.fresh_id::<ContainerId>("c");
        let pse = crypto::seal_pse(
            &material,
            passphrase.secret(),
            ParticipantId::new(AUTHORITY_PARTICIPANT),
            container_id.clone(),
            &authority.config.kdf,
            &mut authority.rng,
        )?;
        instance.apply(Transition::Store, ActorId::new(AUTHORITY_PARTICIPANT), now)?;
        instance.apply(Transition::Deliver, ActorId::new(AUTHORITY_PARTICIPANT), now)?;

        let master = MasterRef {
            key_id: master_key_id.clone(),
            instance_id: instance_id.clone(),
            container_id: container_id.clone(),
        };
        authority.config.master = Some(master.clone());

        // Keep the just-generated secret unsealed for this process.
        authority.master_secret = material.private_part.take();
        material.wipe();

        authority.pses.insert(container_id.clone(), (pse, instance_id.clone()));
        authority.instances.insert(instance_id.clone(), instance);
        authority.save_key(&master_key_id)?;
        authority.save_instance(&instance_id)?;
        authority.save_pse(&container_id)?;

        let params = DocBuilder::new()
            .text("authority_id", authority.config.authority_id.clone())
            .text("master_key_id", master_key_id.as_str())
            .build();
        authority.append_audit(op::INIT, control::parameters_digest(&params), &[])?;

        Ok((
            authority,
            InitReceipt {
                master_passphrase: passphrase,
                master,
            },
        ))
    }

    /// Open an existing repository, replaying every instance history.
    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<KeyAuthority> {
        let repo = Repository::open(root.as_ref())?;
        let config = docs::config_from_doc(&repo.load_config()?)?;
        let mut control = ControlState::new();
        control.token_ttl_secs = config.approval_ttl_secs;
        for id in repo.list(Kind::Operator)? {
            control.insert_operator_unchecked(docs::operator_from_doc(
                &repo.load(Kind::Operator, &id)?,
            )?);
        }

        let mut registry = Registry::new();
        for id in repo.list(Kind::Participant)? {
            registry
                .add_participant(docs::participant_from_doc(&repo.load(Kind::Participant, &id)?)?)?;
        }
        let mut revocations = BTreeMap::new();
        let mut next_serial = BTreeMap::new();
        for id in repo.list(Kind::Issuer)? {
            let parts = docs::issuer_from_doc(&repo.load(Kind::Issuer, &id)?)?;
            let issuer_id = parts.issuer.participant_id.clone();
            next_serial.insert(issuer_id.clone(), parts.next_serial);
            revocations.insert(
                issuer_id.clone(),
                parts
                    .revocations
                    .into_iter()
                    .map(|r| (r.serial, r))
                    .collect::<BTreeMap<_, _>>(),
            );
            for product in parts.products {
                registry.insert_product_unchecked(product, issuer_id.clone());
            }
            registry.insert_issuer_unchecked(parts.issuer);
        }
        for id in repo.list(Kind::Key)? {
            registry.insert_key_unchecked(docs::key_record_from_doc(&repo.load(Kind::Key, &id)?)?);
        }

        let mut instances = BTreeMap::new();
        let mut custody = BTreeMap::new();
        for id in repo.list(Kind::Instance)? {
            let parts = docs::instance_from_doc(&repo.load(Kind::Instance, &id)?)?;
            let instance =
                KeyInstance::replay(parts.instance_id, parts.key_id, parts.origin, parts.history)?;
            if let Some(blob) = parts.custody {
                custody.insert(instance.instance_id().clone(), blob);
            }
            instances.insert(instance.instance_id().clone(), instance);
        }
        let mut deposits = BTreeMap::new();
        for id in repo.list(Kind::Deposit)? {
            let record = docs::deposit_from_doc(&repo.load(Kind::Deposit, &id)?)?;
            deposits.insert(record.deposit_id.clone(), record);
        }
        let mut certs = BTreeMap::new();
        for id in repo.list(Kind::Cert)? {
            let cert = docs::certificate_from_doc(&repo.load(Kind::Cert, &id)?)?;
            certs.insert(cert.id(), cert);
        }
        let mut crls = BTreeMap::new();
        for id in repo.list(Kind::Crl)? {
            let crl = docs::crl_from_doc(&repo.load(Kind::Crl, &id)?)?;
            crls.insert(crl.issuer_id.clone(), crl);
        }
        let mut pses = BTreeMap::new();
        for id in repo.list(Kind::Pse)? {
            let (pse, instance_id) = docs::pse_from_doc(&repo.load(Kind::Pse, &id)?)?;
            pses.insert(pse.container_id.clone(), (pse, instance_id));
        }

        Ok(KeyAuthority {
            repo,
            config,
            registry,
            instances,
            custody,
            deposits,
            certs,
            crls,
            revocations,
            next_serial,
            pses,
            control,
            clock,
            provider: Box::new(SoftwareProvider::default()),
            rng: ChaCha20Rng::from_rng(rand::rngs::OsRng).map_err(|_| CryptoError::RngFailure)?,
            master_secret: None,
            private_read_log: Vec::new(),
        })
    }

    pub fn set_durable(&mut self, durable: bool) {
        self.repo.set_durable(durable);
    }

    /// Swap the crypto provider (e.g. for a non-exporting, hardware-like
    /// one). Affects keys generated afterwards.
    pub fn set_provider(&mut self, provider: Box<dyn CryptoProvider>) {
        self.provider = provider;
    }

    /// Reseed the engine's randomness (scripted runs).
    pub fn reseed_rng(&mut self, seed: [u8; 32]) {
        self.rng = ChaCha20Rng::from_seed(seed);
    }

    // --- accessors -----------------------------------------------------

    pub fn config(&self) -> &KeyAuthorityConfig {
        &self.config
    }

    pub fn repository(&self) -> &Repository {
        &self.repo
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn instance(&self, id: &InstanceId) -> Result<&KeyInstance> {
        self.instances
            .get(id)
            .ok_or_else(|| AuthorityError::UnknownInstance(id.clone()))
    }

    pub fn instances(&self) -> impl Iterator<Item = &KeyInstance> {
        self.instances.values()
    }

    pub fn deposit(&self, id: &DepositId) -> Result<&DepositRecord> {
        self.deposits
            .get(id)
            .ok_or_else(|| AuthorityError::UnknownDeposit(id.clone()))
    }

    pub fn certificate(&self, id: &str) -> Result<&Certificate> {
        self.certs
            .get(id)
            .ok_or_else(|| AuthorityError::UnknownCertificate(id.to_owned()))
    }

    pub fn certificates(&self) -> impl Iterator<Item = &Certificate> {
        self.certs.values()
    }

    pub fn latest_crl(&self, issuer: &ParticipantId) -> Option<&Crl> {
        self.crls.get(issuer)
    }

    pub fn pse(&self, container: &ContainerId) -> Option<&Pse> {
        self.pses.get(container).map(|(pse, _)| pse)
    }

    pub fn has_custody(&self, instance: &InstanceId) -> bool {
        self.custody.contains_key(instance)
    }

    pub fn private_read_log(&self) -> &[(String, KeyId)] {
        &self.private_read_log
    }

    pub fn master_ref(&self) -> Option<&MasterRef> {
        self.config.master.as_ref()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Authenticate one operator and open a session.
    pub fn authenticate_operator(
        &self,
        operator: &OperatorId,
        secret: &str,
    ) -> Result<OperatorSession> {
        Ok(self.control.authenticate(operator, secret, self.clock.now())?)
    }

    // --- persistence helpers --------------------------------------------

    fn save_config(&self) -> Result<()> {
        Ok(self.repo.save_config(&docs::config_doc(&self.config))?)
    }

    fn save_participant(&self, id: &ParticipantId) -> Result<()> {
        let p = self.registry.participant(id)?;
        Ok(self.repo.save(Kind::Participant, id.as_str(), &docs::participant_doc(p))?)
    }

    fn save_issuer(&self, id: &ParticipantId) -> Result<()> {
        let issuer = self.registry.issuer(id)?.clone();
        let parts = docs::IssuerDocParts {
            next_serial: self.next_serial.get(id).copied().unwrap_or(1),
            revocations: self
                .revocations
                .get(id)
                .map(|m| m.values().cloned().collect())
                .unwrap_or_default(),
            products: self
                .registry
                .products()
                .filter(|(_, issuer)| *issuer == id)
                .map(|(p, _)| p.clone())
                .collect(),
            issuer,
        };
        Ok(self.repo.save(Kind::Issuer, id.as_str(), &docs::issuer_doc(&parts))?)
    }

    fn save_key(&self, id: &KeyId) -> Result<()> {
        let record = self.registry.key(id)?;
        Ok(self.repo.save(Kind::Key, id.as_str(), &docs::key_record_doc(record))?)
    }

    fn save_instance(&self, id: &InstanceId) -> Result<()> {
        let instance = self
            .instances
            .get(id)
            .ok_or_else(|| AuthorityError::UnknownInstance(id.clone()))?;
        let doc = docs::instance_doc(instance, self.custody.get(id));
        Ok(self.repo.save(Kind::Instance, id.as_str(), &doc)?)
    }

    fn save_deposit(&self, id: &DepositId) -> Result<()> {
        let record = self
            .deposits
            .get(id)
            .ok_or_else(|| AuthorityError::UnknownDeposit(id.clone()))?;
        Ok(self.repo.save(Kind::Deposit, id.as_str(), &docs::deposit_doc(record))?)
    }

    fn save_cert(&self, id: &str) -> Result<()> {
        let cert = self.certificate(id)?;
        Ok(self.repo.save(Kind::Cert, id, &docs::certificate_doc(cert, true))?)
    }

    fn save_crl(&self, issuer: &ParticipantId) -> Result<()> {
        let crl = self
            .crls
            .get(issuer)
            .expect("save_crl is called right after publishing");
        Ok(self.repo.save(Kind::Crl, issuer.as_str(), &docs::crl_doc(crl, true))?)
    }

    fn save_pse(&self, container: &ContainerId) -> Result<()> {
        let (pse, instance_id) = self
            .pses
            .get(container)
            .expect("save_pse is called right after sealing");
        Ok(self
            .repo
            .save(Kind::Pse, container.as_str(), &docs::pse_doc(pse, instance_id))?)
    }

    fn save_operator(&self, id: &OperatorId) -> Result<()> {
        let operator = self
            .control
            .operator(id)
            .ok_or_else(|| ControlError::UnknownOperator(id.clone()))?;
        Ok(self.repo.save(Kind::Operator, id.as_str(), &docs::operator_doc(operator))?)
    }

    // --- control plumbing ------------------------------------------------

    fn fresh_id<T: From<String>>(&mut self, prefix: &str) -> T {
        let mut raw = [0u8; 8];
        self.rng.fill_bytes(&mut raw);
        T::from(format!("{prefix}-{}", hex::encode(raw)))
    }

    fn actor_of(sessions: &[OperatorSession]) -> ActorId {
        if sessions.is_empty() {
            return ActorId::new(AUTHORITY_PARTICIPANT);
        }
        let mut ids: Vec<&str> = sessions.iter().map(|s| s.operator_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ActorId::new(ids.join("+"))
    }

    /// Authorize and immediately consume a single-use approval token for
    /// this operation, then append its audit record. Returns the approver
    /// set. Operations targeting the master key escalate to dual control.
    fn approve_and_audit(
        &mut self,
        op_name: &str,
        params: &Value,
        sessions: &[OperatorSession],
        target_master: bool,
    ) -> Result<Vec<OperatorId>> {
        let digest = control::parameters_digest(params);
        let now = self.clock.now();
        let mut policy = self.config.dual_control_policy.clone();
        if target_master {
            policy = policy.with_dual(op_name);
        }
        let approvers: Vec<OperatorId> = if !self.control.has_operators()
            && op_name == op::OPERATOR_ADD
        {
            // Bootstrap: the very first operator is added with no approver.
            Vec::new()
        } else {
            let token =
                self.control
                    .authorize(op_name, digest, sessions, &policy, now, &mut self.rng)?;
            self.control.consume(&token, op_name, digest, now)?;
            token.approvers.into_iter().collect()
        };
        self.append_audit(op_name, digest, &approvers)?;
        Ok(approvers)
    }

    /// Append one record to the audit chain and flush it before any effect
    /// of the operation commits.
    fn append_audit(
        &mut self,
        op_name: &str,
        digest: [u8; 32],
        approvers: &[OperatorId],
    ) -> Result<()> {
        let record = control::make_audit_record(
            self.config.audit_count,
            self.config.audit_head.clone(),
            self.clock.now(),
            op_name,
            digest,
            approvers.to_vec(),
        );
        self.repo.append_audit(&docs::audit_record_doc(&record))?;
        self.config.audit_count += 1;
        self.config.audit_head = record.record_hash;
        self.save_config()
    }

    /// Read back the audit log and verify the chain plus the registered
    /// head (which catches truncation).
    pub fn verify_audit(&self) -> Result<AuditVerdict> {
        let records: Vec<AuditRecord> = self
            .repo
            .read_audit()?
            .iter()
            .map(docs::audit_record_from_doc)
            .collect::<std::result::Result<_, _>>()?;
        let verdict = control::verify_audit_chain(&records);
        if !verdict.is_valid() {
            return Ok(verdict);
        }
        let head_matches = match records.last() {
            Some(last) => {
                records.len() as u64 == self.config.audit_count
                    && last.record_hash == self.config.audit_head
            }
            None => self.config.audit_count == 0,
        };
        if !head_matches {
            return Ok(AuditVerdict::Broken {
                at: records.len() as u64,
                reason: control::AuditBreak::HeadMismatch,
            });
        }
        Ok(verdict)
    }

    pub fn audit_records(&self) -> Result<Vec<AuditRecord>> {
        Ok(self
            .repo
            .read_audit()?
            .iter()
            .map(docs::audit_record_from_doc)
            .collect::<std::result::Result<_, _>>()?)
    }

    // --- master key and custody -------------------------------------------

    /// Open the master PSE with the one-time passphrase and cache the
    /// secret for this process. Records a `Use` on the master instance.
    pub fn unseal_master(&mut self, passphrase: &str) -> Result<()> {
        if self.master_secret.is_some() {
            return Ok(());
        }
        let master = self
            .config
            .master
            .clone()
            .ok_or(AuthorityError::MasterKeyUnavailable)?;
        let (pse, _) = self
            .pses
            .get(&master.container_id)
            .ok_or(AuthorityError::MasterKeyUnavailable)?;
        let mut material = crypto::open_pse(pse, passphrase)?;
        // The authority's own key; not an issuer or foreign key, so this
        // read is outside the audit-coverage obligation, but it is logged
        // all the same.
        self.private_read_log
            .push(("unseal_master".to_owned(), master.key_id.clone()));
        self.master_secret = material.private_part.take();
        material.wipe();
        let now = self.clock.now();
        let instance = self
            .instances
            .get_mut(&master.instance_id)
            .ok_or_else(|| AuthorityError::UnknownInstance(master.instance_id.clone()))?;
        instance.apply(Transition::Use, ActorId::new(AUTHORITY_PARTICIPANT), now)?;
        self.save_instance(&master.instance_id)?;
        Ok(())
    }

    pub fn master_unsealed(&self) -> bool {
        self.master_secret.is_some()
    }

    fn master_secret(&self) -> Result<&SecretBytes> {
        self.master_secret
            .as_ref()
            .ok_or(AuthorityError::MasterKeyUnavailable)
    }

    fn is_master_instance(&self, instance: &InstanceId) -> bool {
        self.config
            .master
            .as_ref()
            .is_some_and(|m| m.instance_id == *instance)
    }

    fn custody_wrap_key(&self, instance: &InstanceId) -> Result<[u8; 32]> {
        let secret = self.master_secret()?;
        Ok(crypto::derive_wrap_key(
            secret.expose(),
            format!("custody:{instance}").as_bytes(),
        ))
    }

    fn deposit_wrap_key(&self, deposit: &DepositId) -> Result<[u8; 32]> {
        let secret = self.master_secret()?;
        Ok(crypto::derive_wrap_key(
            secret.expose(),
            format!("deposit:{deposit}").as_bytes(),
        ))
    }

    fn custody_aad(&self, instance: &InstanceId, key: &KeyId) -> Vec<u8> {
        crate::store::canonical::encode(
            &DocBuilder::new()
                .text("authority_id", self.config.authority_id.clone())
                .text("instance_id", instance.as_str())
                .text("key_id", key.as_str())
                .build(),
        )
    }

    fn deposit_aad(&self, record: &DepositRecord) -> Vec<u8> {
        crate::store::canonical::encode(
            &DocBuilder::new()
                .text("authority_id", self.config.authority_id.clone())
                .text("deposit_id", record.deposit_id.as_str())
                .int("deposited_at", record.deposited_at.as_secs())
                .text("key_id", record.key_id.as_str())
                .text("purpose", docs::deposit_purpose_name(record.purpose))
                .build(),
        )
    }

    /// Wrap private material into the instance's custody blob.
    fn store_custody(&mut self, instance: &InstanceId, material: &KeyMaterial) -> Result<()> {
        let private = material
            .private_part
            .as_ref()
            .ok_or(CryptoError::PrivateKeyUnavailable)?;
        let wrap_key = self.custody_wrap_key(instance)?;
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        let sealed = crypto::wrap_secret(
            &wrap_key,
            &nonce,
            private.expose(),
            &self.custody_aad(instance, &material.key_id),
        );
        self.custody.insert(
            instance.clone(),
            CustodyBlob {
                nonce: nonce.to_vec(),
                sealed,
            },
        );
        Ok(())
    }

    /// Unwrap an instance's custody blob into full key material. Every
    /// call is recorded in the private-read log under `op_name`.
    fn open_custody(&mut self, op_name: &str, instance_id: &InstanceId) -> Result<KeyMaterial> {
        let instance = self
            .instances
            .get(instance_id)
            .ok_or_else(|| AuthorityError::UnknownInstance(instance_id.clone()))?;
        let key_id = instance.key_id().clone();
        let blob = self
            .custody
            .get(instance_id)
            .ok_or(CryptoError::PrivateKeyUnavailable)?;
        let wrap_key = self.custody_wrap_key(instance_id)?;
        let nonce: [u8; 12] = blob
            .nonce
            .as_slice()
            .try_into()
            .map_err(|_| AuthorityError::UnwrapFailed)?;
        let private =
            crypto::unwrap_secret(&wrap_key, &nonce, &blob.sealed, &self.custody_aad(instance_id, &key_id))
                .map_err(|_| AuthorityError::UnwrapFailed)?;
        let record = self.registry.key(&key_id)?;
        self.private_read_log.push((op_name.to_owned(), key_id.clone()));
        Ok(KeyMaterial {
            key_id: key_id.clone(),
            algorithm: record.algorithm.clone(),
            public_part: record.public_part.clone(),
            private_part: Some(private),
            created_at: record.created_at,
            exportable: record.exportable,
        })
    }

    /// Find the authority-held usable instance of a key (the one serving
    /// signatures).
    fn held_usable_instance(&self, key: &KeyId) -> Option<InstanceId> {
        self.instances
            .values()
            .find(|i| {
                i.key_id() == key
                    && i.state() == LifecycleState::Usable
                    && self.custody.contains_key(i.instance_id())
            })
            .map(|i| i.instance_id().clone())
    }

    /// Sign with an authority-held key: unwrap custody, sign, wipe, and
    /// record a `Use` transition on the serving instance.
    fn sign_with_held_key(
        &mut self,
        op_name: &str,
        key: &KeyId,
        message: &[u8],
        actor: &ActorId,
    ) -> Result<Vec<u8>> {
        let instance_id = self
            .held_usable_instance(key)
            .ok_or(CryptoError::PrivateKeyUnavailable)?;
        let mut material = self.open_custody(op_name, &instance_id)?;
        let signature = self.provider.sign(&material, message);
        material.wipe();
        let signature = signature?;
        let now = self.clock.now();
        let instance = self.instances.get_mut(&instance_id).expect("held instance");
        instance.apply(Transition::Use, actor.clone(), now)?;
        self.save_instance(&instance_id)?;
        Ok(signature)
    }

    /// The issuing key valid right now, or `NoValidIssuingKey`.
    fn current_issuing_key(&self, issuer: &ParticipantId) -> Result<KeyId> {
        self.registry
            .valid_issuing_key(issuer, self.clock.now())?
            .cloned()
            .ok_or_else(|| AuthorityError::NoValidIssuingKey(issuer.clone()))
    }

    // --- operator and registry management ----------------------------------

    /// Add an operator. The very first operator bootstraps with no
    /// approver; afterwards one operator approves.
    pub fn add_operator(
        &mut self,
        operator_id: OperatorId,
        secret: &str,
        sessions: &[OperatorSession],
    ) -> Result<()> {
        if self.control.operator(&operator_id).is_some() {
            return Err(ControlError::DuplicateOperator(operator_id).into());
        }
        let params = DocBuilder::new().text("operator_id", operator_id.as_str()).build();
        self.approve_and_audit(op::OPERATOR_ADD, &params, sessions, false)?;
        let kdf = self.config.kdf.clone();
        self.control.add_operator(operator_id.clone(), secret, &kdf, &mut self.rng)?;
        self.save_operator(&operator_id)?;
        Ok(())
    }

    /// Create an issuer (a participant with a fresh distinguished name)
    /// and host its core key authority.
    pub fn create_issuer(&mut self, dn: &str, sessions: &[OperatorSession]) -> Result<Issuer> {
        // Validate before approving so no audit record is written for a
        // rejected name.
        let normalized = crate::domain::validate_distinguished_name(dn)?;
        if self.registry.issuer_by_dn(&normalized).is_some() {
            return Err(DomainError::DuplicateDistinguishedName.into());
        }
        let params = DocBuilder::new().text("dn", normalized.clone()).build();
        self.approve_and_audit(op::ISSUER_CREATE, &params, sessions, false)?;
        let issuer_id = self.fresh_id::<ParticipantId>("i");
        let issuer = self.registry.create_issuer(issuer_id.clone(), &normalized)?.clone();
        self.config.hosted_core_authorities.insert(issuer_id.clone());
        self.next_serial.insert(issuer_id.clone(), 1);
        self.revocations.insert(issuer_id.clone(), BTreeMap::new());
        self.save_participant(&issuer_id)?;
        self.save_issuer(&issuer_id)?;
        self.save_config()?;
        Ok(issuer)
    }

    pub fn add_participant(
        &mut self,
        display_name: &str,
        sessions: &[OperatorSession],
    ) -> Result<Participant> {
        let params = DocBuilder::new().text("display_name", display_name).build();
        self.approve_and_audit(op::PARTICIPANT_ADD, &params, sessions, false)?;
        let id = self.fresh_id::<ParticipantId>("p");
        let participant = self
            .registry
            .add_participant(Participant {
                participant_id: id.clone(),
                display_name: display_name.to_owned(),
                is_issuer: false,
            })?
            .clone();
        self.save_participant(&id)?;
        Ok(participant)
    }

    // --- key generation and issuing key rollover -----------------------------

    /// Generate a key pair for a participant within an issuer's core PKI.
    /// The new instance starts storable, its material wrapped in custody.
    pub fn generate_participant_keys(
        &mut self,
        issuer: &ParticipantId,
        owner: &ParticipantId,
        algorithm: &str,
        sessions: &[OperatorSession],
    ) -> Result<(KeyId, InstanceId)> {
        self.registry.issuer(issuer)?;
        if self.registry.participant(owner).is_err() {
            return Err(AuthorityError::UnknownSubject(owner.clone()));
        }
        self.master_secret()?;
        let params = DocBuilder::new()
            .text("algorithm", algorithm)
            .text("issuer", issuer.as_str())
            .text("owner", owner.as_str())
            .build();
        let approvers =
            self.approve_and_audit(op::GENERATE_PARTICIPANT_KEYS, &params, sessions, false)?;
        let (key_id, instance_id) =
            self.generate_key_internal(op::GENERATE_PARTICIPANT_KEYS, issuer, owner, algorithm, &approvers)?;
        Ok((key_id, instance_id))
    }

    fn generate_key_internal(
        &mut self,
        op_name: &str,
        issuer: &ParticipantId,
        owner: &ParticipantId,
        algorithm: &str,
        approvers: &[OperatorId],
    ) -> Result<(KeyId, InstanceId)> {
        let now = self.clock.now();
        let key_id = self.fresh_id::<KeyId>("k");
        let mut material =
            self.provider
                .generate_keypair(key_id.clone(), algorithm, &mut self.rng, now)?;
        self.registry.register_key(KeyRecord {
            key_id: key_id.clone(),
            algorithm: material.algorithm.clone(),
            public_part: material.public_part.clone(),
            created_at: now,
            exportable: material.exportable,
            ownership: vec![OwnershipRecord {
                owner: owner.clone(),
                since: now,
            }],
        })?;
        let instance_id = self.fresh_id::<InstanceId>("x");
        let actor = ActorId::new(
            approvers
                .iter()
                .map(|o| o.as_str())
                .collect::<Vec<_>>()
                .join("+"),
        );
        let instance = KeyInstance::generate(instance_id.clone(), key_id.clone(), actor, now);
        self.instances.insert(instance_id.clone(), instance);
        self.store_custody(&instance_id, &material)?;
        material.wipe();
        self.private_read_log.push((op_name.to_owned(), key_id.clone()));
        self.registry
            .register_product(ProductId::new(format!("key:{key_id}")), issuer)?;
        self.save_key(&key_id)?;
        self.save_instance(&instance_id)?;
        self.save_issuer(issuer)?;
        Ok((key_id, instance_id))
    }

    /// Generate a fresh issuing key for the issuer and make it the valid
    /// one from `effective`. The new instance is stored and delivered into
    /// authority custody (the issuer's keys never leave the authority).
    pub fn rollover_issuing_key(
        &mut self,
        issuer: &ParticipantId,
        effective: Timestamp,
        sessions: &[OperatorSession],
    ) -> Result<(KeyId, Issuer)> {
        let current_from = self
            .registry
            .issuer(issuer)?
            .issuing_keys
            .last()
            .map(|w| w.valid_from);
        if let Some(from) = current_from {
            if effective < from {
                return Err(DomainError::OverlapViolation {
                    effective,
                    current_from: from,
                }
                .into());
            }
        }
        self.master_secret()?;
        let params = DocBuilder::new()
            .int("effective", effective.as_secs())
            .text("issuer", issuer.as_str())
            .build();
        let approvers =
            self.approve_and_audit(op::ROLLOVER_ISSUING_KEY, &params, sessions, false)?;
        let (key_id, instance_id) = self.generate_key_internal(
            op::ROLLOVER_ISSUING_KEY,
            issuer,
            &issuer.clone(),
            ALG_ED25519,
            &approvers,
        )?;
        let actor = Self::actor_of(sessions);
        let deliver_actor = ActorId::new(format!("{actor}@{CHANNEL_AUTHORITY_CUSTODY}"));
        let now = self.clock.now();
        {
            let instance = self.instances.get_mut(&instance_id).expect("just created");
            instance.apply(Transition::Store, actor, now)?;
            instance.apply(Transition::Deliver, deliver_actor, now)?;
        }
        self.save_instance(&instance_id)?;
        let issuer_record = self
            .registry
            .rollover_issuing_key(issuer, &key_id, effective)?
            .clone();
        self.save_issuer(issuer)?;
        Ok((key_id, issuer_record))
    }

    /// Move a storable, authority-held instance into service (store +
    /// deliver with custody retained). Used for issuer purpose keys.
    pub fn hold_in_custody(
        &mut self,
        instance_id: &InstanceId,
        sessions: &[OperatorSession],
    ) -> Result<()> {
        let instance = self.instance(instance_id)?;
        let key_id = instance.key_id().clone();
        let owner = self.registry.key(&key_id)?.current_owner().clone();
        if !self.custody.contains_key(instance_id) {
            return Err(CryptoError::PrivateKeyUnavailable.into());
        }
        let params = DocBuilder::new().text("instance", instance_id.as_str()).build();
        let target_master = self.is_master_instance(instance_id);
        self.approve_and_audit(op::HOLD_IN_CUSTODY, &params, sessions, target_master)?;
        let actor = Self::actor_of(sessions);
        let deliver_actor = ActorId::new(format!("{actor}@{CHANNEL_AUTHORITY_CUSTODY}"));
        let now = self.clock.now();
        let instance = self.instances.get_mut(instance_id).expect("checked above");
        instance.apply(Transition::Store, actor, now)?;
        instance.apply(Transition::Deliver, deliver_actor, now)?;
        let _ = owner;
        self.save_instance(instance_id)?;
        Ok(())
    }

    // --- issuing and revocation ------------------------------------------------

    /// Issue a certificate over a registered subject key, signed with the
    /// issuer's currently valid issuing key.
    #[allow(clippy::too_many_arguments)]
    pub fn issue_certificate(
        &mut self,
        issuer: &ParticipantId,
        subject: &ParticipantId,
        subject_key: &KeyId,
        valid_from: Timestamp,
        valid_to: Timestamp,
        key_usage: BTreeSet<String>,
        sessions: &[OperatorSession],
    ) -> Result<Certificate> {
        let issuer_record = self.registry.issuer(issuer)?.clone();
        let subject_record = self
            .registry
            .participant(subject)
            .map_err(|_| AuthorityError::UnknownSubject(subject.clone()))?
            .clone();
        let key_record = self.registry.key(subject_key)?.clone();
        let signing_key = self.current_issuing_key(issuer)?;
        self.master_secret()?;
        let params = DocBuilder::new()
            .text("issuer", issuer.as_str())
            .text("subject", subject.as_str())
            .text("subject_key", subject_key.as_str())
            .int("valid_from", valid_from.as_secs())
            .int("valid_to", valid_to.as_secs())
            .build();
        self.approve_and_audit(op::ISSUE_CERTIFICATE, &params, sessions, false)?;
        self.issue_internal(
            op::ISSUE_CERTIFICATE,
            &issuer_record.participant_id,
            &issuer_record.distinguished_name,
            subject_record.display_name.clone(),
            key_record.algorithm.clone(),
            key_record.public_part.clone(),
            valid_from,
            valid_to,
            key_usage,
            signing_key,
            &Self::actor_of(sessions),
        )
    }

    /// Cross-certify another issuer's current issuing key. The product
    /// belongs to the signer's core PKI.
    pub fn issue_cross_certificate(
        &mut self,
        signer: &ParticipantId,
        subject_issuer: &ParticipantId,
        valid_from: Timestamp,
        valid_to: Timestamp,
        sessions: &[OperatorSession],
    ) -> Result<Certificate> {
        if signer == subject_issuer {
            return Err(AuthorityError::SelfCrossCert);
        }
        let signer_record = self.registry.issuer(signer)?.clone();
        let subject_record = self.registry.issuer(subject_issuer)?.clone();
        let subject_key_id = self
            .registry
            .valid_issuing_key(subject_issuer, self.clock.now())?
            .cloned()
            .ok_or_else(|| AuthorityError::NoValidIssuingKey(subject_issuer.clone()))?;
        let subject_key = self.registry.key(&subject_key_id)?.clone();
        let signing_key = self.current_issuing_key(signer)?;
        self.master_secret()?;
        let params = DocBuilder::new()
            .text("signer", signer.as_str())
            .text("subject_issuer", subject_issuer.as_str())
            .int("valid_from", valid_from.as_secs())
            .int("valid_to", valid_to.as_secs())
            .build();
        self.approve_and_audit(op::ISSUE_CROSS_CERTIFICATE, &params, sessions, false)?;
        self.issue_internal(
            op::ISSUE_CROSS_CERTIFICATE,
            &signer_record.participant_id,
            &signer_record.distinguished_name,
            subject_record.distinguished_name.clone(),
            subject_key.algorithm.clone(),
            subject_key.public_part.clone(),
            valid_from,
            valid_to,
            ["cert-sign".to_owned()].into_iter().collect(),
            signing_key,
            &Self::actor_of(sessions),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_internal(
        &mut self,
        op_name: &str,
        issuer_id: &ParticipantId,
        issuer_dn: &str,
        subject_dn: String,
        subject_key_algorithm: String,
        subject_public_key: Vec<u8>,
        valid_from: Timestamp,
        valid_to: Timestamp,
        key_usage: BTreeSet<String>,
        signing_key: KeyId,
        actor: &ActorId,
    ) -> Result<Certificate> {
        let serial_slot = self.next_serial.entry(issuer_id.clone()).or_insert(1);
        let serial = *serial_slot;
        *serial_slot += 1;
        let mut cert = Certificate {
            serial,
            issuer_dn: issuer_dn.to_owned(),
            issuer_id: issuer_id.clone(),
            subject_dn,
            subject_key_algorithm,
            subject_public_key,
            valid_from,
            valid_to,
            key_usage,
            signing_key_id: signing_key.clone(),
            signature: Vec::new(),
        };
        cert.signature = self.sign_with_held_key(op_name, &signing_key, &cert.signed_bytes(), actor)?;
        let cert_id = cert.id();
        self.certs.insert(cert_id.clone(), cert.clone());
        self.registry
            .register_product(ProductId::new(format!("cert:{cert_id}")), issuer_id)?;
        self.save_cert(&cert_id)?;
        self.save_issuer(issuer_id)?;
        Ok(cert)
    }

    /// Mark a serial revoked. The revocation set only grows; publishing
    /// puts it on a CRL.
    pub fn revoke(
        &mut self,
        issuer: &ParticipantId,
        serial: u64,
        reason: &str,
        sessions: &[OperatorSession],
    ) -> Result<RevocationEntry> {
        self.registry.issuer(issuer)?;
        let cert_id = format!("{issuer}-{serial}");
        if !self.certs.contains_key(&cert_id) {
            return Err(AuthorityError::UnknownSerial(serial));
        }
        if self
            .revocations
            .get(issuer)
            .is_some_and(|m| m.contains_key(&serial))
        {
            return Err(AuthorityError::AlreadyRevoked(serial));
        }
        let params = DocBuilder::new()
            .text("issuer", issuer.as_str())
            .text("reason", reason)
            .int("serial", serial as i64)
            .build();
        self.approve_and_audit(op::REVOKE, &params, sessions, false)?;
        let entry = RevocationEntry {
            serial,
            revoked_at: self.clock.now(),
            reason: reason.to_owned(),
        };
        self.revocations
            .entry(issuer.clone())
            .or_default()
            .insert(serial, entry.clone());
        self.save_issuer(issuer)?;
        Ok(entry)
    }

    /// Sign a full CRL over the issuer's current revocation set,
    /// superseding the previous one.
    pub fn publish_crl(
        &mut self,
        issuer: &ParticipantId,
        next_update: Timestamp,
        sessions: &[OperatorSession],
    ) -> Result<Crl> {
        let issuer_record = self.registry.issuer(issuer)?.clone();
        let signing_key = self.current_issuing_key(issuer)?;
        self.master_secret()?;
        let params = DocBuilder::new()
            .text("issuer", issuer.as_str())
            .int("next_update", next_update.as_secs())
            .build();
        self.approve_and_audit(op::PUBLISH_CRL, &params, sessions, false)?;
        let entries: Vec<RevocationEntry> = self
            .revocations
            .get(issuer)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default();
        let mut crl = Crl {
            issuer_dn: issuer_record.distinguished_name.clone(),
            issuer_id: issuer.clone(),
            this_update: self.clock.now(),
            next_update,
            entries,
            signing_key_id: signing_key.clone(),
            signature: Vec::new(),
        };
        crl.signature = self.sign_with_held_key(
            op::PUBLISH_CRL,
            &signing_key,
            &crl.signed_bytes(),
            &Self::actor_of(sessions),
        )?;
        self.crls.insert(issuer.clone(), crl.clone());
        self.save_crl(issuer)?;
        Ok(crl)
    }

    /// Sign an arbitrary message with one of the issuer's keys (timestamp
    /// tokens and similar issuer tasks). Signing with the issuing key
    /// itself is allowed but audited under the purpose label `raw-sign`.
    pub fn sign_for_purpose(
        &mut self,
        issuer: &ParticipantId,
        purpose_key: &KeyId,
        message: &[u8],
        sessions: &[OperatorSession],
    ) -> Result<Vec<u8>> {
        self.registry.issuer(issuer)?;
        let now = self.clock.now();
        if !self.registry.is_own_key(issuer, purpose_key, now)? {
            return Err(DomainError::KeyNotOwnedByIssuer(purpose_key.clone()).into());
        }
        self.master_secret()?;
        let purpose = if self.registry.valid_issuing_key(issuer, now)? == Some(purpose_key) {
            "raw-sign"
        } else {
            "purpose-sign"
        };
        let params = DocBuilder::new()
            .text("issuer", issuer.as_str())
            .text("key", purpose_key.as_str())
            .bytes("message_digest", control::parameters_digest(&Value::bytes(message.to_vec())).to_vec())
            .text("purpose", purpose)
            .build();
        self.approve_and_audit(op::SIGN_FOR_PURPOSE, &params, sessions, false)?;
        self.sign_with_held_key(
            op::SIGN_FOR_PURPOSE,
            purpose_key,
            message,
            &Self::actor_of(sessions),
        )
    }

    // --- personalization, delivery, escrow -------------------------------------

    /// Seal a storable instance into a PSE for its owner, generating the
    /// passphrase. The instance becomes deliverable. The passphrase is
    /// returned exactly once and never persisted. Custody is retained only
    /// for issuer-owned keys.
    pub fn personalize(
        &mut self,
        instance_id: &InstanceId,
        subject: &ParticipantId,
        sessions: &[OperatorSession],
    ) -> Result<(Pse, Passphrase)> {
        let instance = self.instance(instance_id)?;
        if instance.state() != LifecycleState::Storable {
            return Err(LifecycleError::IllegalTransition {
                from: instance.state(),
                transition: Transition::Store,
            }
            .into());
        }
        let key_id = instance.key_id().clone();
        let owner = self.registry.key(&key_id)?.current_owner().clone();
        if owner != *subject {
            return Err(AuthorityError::NotOwner {
                instance: instance_id.clone(),
                subject: subject.clone(),
            });
        }
        self.master_secret()?;
        let params = DocBuilder::new()
            .text("instance", instance_id.as_str())
            .text("subject", subject.as_str())
            .build();
        let target_master = self.is_master_instance(instance_id);
        self.approve_and_audit(op::PERSONALIZE, &params, sessions, target_master)?;

        let passphrase =
            crypto::generate_passphrase(&self.config.passphrase_policy, &mut self.rng)?;
        let mut material = self.open_custody(op::PERSONALIZE, instance_id)?;
        let container_id = self.fresh_id::<ContainerId>("c");
        let kdf = self.config.kdf.clone();
        let pse = crypto::seal_pse(
            &material,
            passphrase.secret(),
            subject.clone(),
            container_id.clone(),
            &kdf,
            &mut self.rng,
        )?;
        material.wipe();

        let subject_is_issuer = self.registry.participant(subject)?.is_issuer;
        if !subject_is_issuer {
            self.custody.remove(instance_id);
        }

        let actor = Self::actor_of(sessions);
        let now = self.clock.now();
        self.instances
            .get_mut(instance_id)
            .expect("instance checked above")
            .apply(Transition::Store, actor, now)?;
        self.pses
            .insert(container_id.clone(), (pse.clone(), instance_id.clone()));
        // The sealed token is a trust center product of the key's core PKI
        // (the master PSE predates any issuer and stays unregistered).
        let key_product = ProductId::new(format!("key:{key_id}"));
        if let Ok(issuer) = self.registry.core_pki_of(&key_product).cloned() {
            self.registry
                .register_product(ProductId::new(format!("pse:{container_id}")), &issuer)?;
            self.save_issuer(&issuer)?;
        }
        self.save_pse(&container_id)?;
        self.save_instance(instance_id)?;
        Ok((pse, passphrase))
    }

    /// Record that the token reached its participant: deliverable → usable.
    pub fn record_delivery(
        &mut self,
        instance_id: &InstanceId,
        recipient: &ParticipantId,
        channel: &str,
        sessions: &[OperatorSession],
    ) -> Result<()> {
        let instance = self.instance(instance_id)?;
        if instance.state() != LifecycleState::Deliverable {
            return Err(LifecycleError::IllegalTransition {
                from: instance.state(),
                transition: Transition::Deliver,
            }
            .into());
        }
        let key_id = instance.key_id().clone();
        let owner = self.registry.key(&key_id)?.current_owner().clone();
        if owner != *recipient {
            return Err(AuthorityError::RecipientNotOwner {
                instance: instance_id.clone(),
                recipient: recipient.clone(),
            });
        }
        let params = DocBuilder::new()
            .text("channel", channel)
            .text("instance", instance_id.as_str())
            .text("recipient", recipient.as_str())
            .build();
        let target_master = self.is_master_instance(instance_id);
        self.approve_and_audit(op::RECORD_DELIVERY, &params, sessions, target_master)?;
        let actor = ActorId::new(format!("{}@{channel}", Self::actor_of(sessions)));
        let now = self.clock.now();
        self.instances
            .get_mut(instance_id)
            .expect("instance checked above")
            .apply(Transition::Deliver, actor, now)?;
        self.save_instance(instance_id)?;
        Ok(())
    }

    /// Escrow a storable instance: wrap its material under the master key
    /// and mark it deposited. The custody copy is dropped; only the
    /// wrapped deposit remains.
    pub fn deposit_key(
        &mut self,
        instance_id: &InstanceId,
        purpose: DepositPurpose,
        sessions: &[OperatorSession],
    ) -> Result<DepositRecord> {
        let instance = self.instance(instance_id)?;
        if instance.state() != LifecycleState::Storable {
            return Err(LifecycleError::IllegalTransition {
                from: instance.state(),
                transition: Transition::Deposit,
            }
            .into());
        }
        let key_id = instance.key_id().clone();
        self.master_secret()?;
        if !self.custody.contains_key(instance_id) {
            return Err(CryptoError::PrivateKeyUnavailable.into());
        }
        let params = DocBuilder::new()
            .text("instance", instance_id.as_str())
            .text("purpose", docs::deposit_purpose_name(purpose))
            .build();
        let target_master = self.is_master_instance(instance_id);
        self.approve_and_audit(op::DEPOSIT_KEY, &params, sessions, target_master)?;

        let mut material = self.open_custody(op::DEPOSIT_KEY, instance_id)?;
        let deposit_id = self.fresh_id::<DepositId>("d");
        let now = self.clock.now();
        let mut record = DepositRecord {
            deposit_id: deposit_id.clone(),
            key_id: key_id.clone(),
            source_instance: instance_id.clone(),
            purpose,
            deposited_at: now,
            nonce: vec![0u8; 12],
            wrapped_private_key: Vec::new(),
        };
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        record.nonce = nonce.to_vec();
        let wrap_key = self.deposit_wrap_key(&deposit_id)?;
        record.wrapped_private_key = crypto::wrap_secret(
            &wrap_key,
            &nonce,
            material
                .private_part
                .as_ref()
                .expect("custody material carries the private part")
                .expose(),
            &self.deposit_aad(&record),
        );
        material.wipe();
        self.custody.remove(instance_id);

        let actor = Self::actor_of(sessions);
        self.instances
            .get_mut(instance_id)
            .expect("instance checked above")
            .apply(Transition::Deposit, actor, now)?;
        self.deposits.insert(deposit_id.clone(), record.clone());
        self.save_deposit(&deposit_id)?;
        self.save_instance(instance_id)?;
        Ok(record)
    }

    /// Recover a deposit into a brand-new storable instance. The deposited
    /// source stays deposited. Dual control.
    pub fn recover_key(
        &mut self,
        deposit_id: &DepositId,
        sessions: &[OperatorSession],
    ) -> Result<(KeyId, InstanceId)> {
        let record = self
            .deposits
            .get(deposit_id)
            .ok_or_else(|| AuthorityError::UnknownDeposit(deposit_id.clone()))?
            .clone();
        self.master_secret()?;
        let params = DocBuilder::new().text("deposit", deposit_id.as_str()).build();
        self.approve_and_audit(op::RECOVER_KEY, &params, sessions, false)?;

        let wrap_key = self.deposit_wrap_key(deposit_id)?;
        let nonce: [u8; 12] = record
            .nonce
            .as_slice()
            .try_into()
            .map_err(|_| AuthorityError::UnwrapFailed)?;
        let private = crypto::unwrap_secret(
            &wrap_key,
            &nonce,
            &record.wrapped_private_key,
            &self.deposit_aad(&record),
        )
        .map_err(|_| AuthorityError::UnwrapFailed)?;
        self.private_read_log
            .push((op::RECOVER_KEY.to_owned(), record.key_id.clone()));

        let key_record = self.registry.key(&record.key_id)?.clone();
        let material = KeyMaterial {
            key_id: record.key_id.clone(),
            algorithm: key_record.algorithm.clone(),
            public_part: key_record.public_part.clone(),
            private_part: Some(private),
            created_at: key_record.created_at,
            exportable: key_record.exportable,
        };

        let source_id = record.source_instance.clone();
        let new_id = self.fresh_id::<InstanceId>("x");
        let actor = Self::actor_of(sessions);
        let now = self.clock.now();
        let source = self
            .instances
            .get_mut(&source_id)
            .ok_or_else(|| AuthorityError::UnknownInstance(source_id.clone()))?;
        let new_instance = KeyInstance::recover_from(source, new_id.clone(), actor, now)?;
        self.instances.insert(new_id.clone(), new_instance);
        self.store_custody(&new_id, &material)?;
        drop(material);
        self.save_instance(&source_id)?;
        self.save_instance(&new_id)?;
        Ok((record.key_id, new_id))
    }

    /// Construct a new instance by copying a live one. Storable sources
    /// copy freely; usable sources only when the holding token permits
    /// export. Dual control.
    pub fn copy_key(
        &mut self,
        source_id: &InstanceId,
        sessions: &[OperatorSession],
    ) -> Result<InstanceId> {
        let source = self.instance(source_id)?;
        if source.retired() {
            return Err(LifecycleError::SourceRetired.into());
        }
        match source.state() {
            LifecycleState::Storable => {}
            LifecycleState::Usable => {
                let exportable = self.registry.key(source.key_id())?.exportable;
                if !exportable || !self.custody.contains_key(source_id) {
                    return Err(AuthorityError::ExportForbidden);
                }
            }
            other => return Err(LifecycleError::SourceNotCopyable(other).into()),
        }
        if !self.custody.contains_key(source_id) {
            return Err(CryptoError::PrivateKeyUnavailable.into());
        }
        self.master_secret()?;
        let params = DocBuilder::new().text("source", source_id.as_str()).build();
        let target_master = self.is_master_instance(source_id);
        self.approve_and_audit(op::COPY_KEY, &params, sessions, target_master)?;

        let mut material = self.open_custody(op::COPY_KEY, source_id)?;
        let new_id = self.fresh_id::<InstanceId>("x");
        let actor = Self::actor_of(sessions);
        let now = self.clock.now();
        let source = self.instances.get_mut(source_id).expect("checked above");
        let new_instance = KeyInstance::copy_from(source, new_id.clone(), actor, now)?;
        self.instances.insert(new_id.clone(), new_instance);
        self.store_custody(&new_id, &material)?;
        material.wipe();
        self.save_instance(source_id)?;
        self.save_instance(&new_id)?;
        Ok(new_id)
    }

    /// Destroy one instance irrecoverably: wipe custody, shred any deposit
    /// holding it, shred its PSE containers, and retire the machine. Other
    /// instances of the same key are untouched. Dual control.
    pub fn destroy_key(
        &mut self,
        instance_id: &InstanceId,
        sessions: &[OperatorSession],
    ) -> Result<()> {
        let instance = self.instance(instance_id)?;
        if instance.retired() {
            return Err(LifecycleError::InstanceRetired.into());
        }
        let params = DocBuilder::new().text("instance", instance_id.as_str()).build();
        let target_master = self.is_master_instance(instance_id);
        self.approve_and_audit(op::DESTROY_KEY, &params, sessions, target_master)?;

        if let Some(mut blob) = self.custody.remove(instance_id) {
            blob.sealed.zeroize();
            blob.nonce.zeroize();
        }
        let dead_deposits: Vec<DepositId> = self
            .deposits
            .values()
            .filter(|d| d.source_instance == *instance_id)
            .map(|d| d.deposit_id.clone())
            .collect();
        for deposit_id in dead_deposits {
            self.repo.shred(Kind::Deposit, deposit_id.as_str())?;
            self.deposits.remove(&deposit_id);
        }
        let dead_pses: Vec<ContainerId> = self
            .pses
            .iter()
            .filter(|(_, (_, owner))| owner == instance_id)
            .map(|(id, _)| id.clone())
            .collect();
        for container in dead_pses {
            self.repo.shred(Kind::Pse, container.as_str())?;
            self.pses.remove(&container);
        }
        if self.is_master_instance(instance_id) {
            if let Some(mut secret) = self.master_secret.take() {
                secret.zero_in_place();
            }
        }

        let actor = Self::actor_of(sessions);
        let now = self.clock.now();
        self.instances
            .get_mut(instance_id)
            .expect("instance checked above")
            .apply(Transition::Destruct, actor, now)?;
        self.save_instance(instance_id)?;
        Ok(())
    }

    /// Reassign a key's owner (e.g. to a superior when an employee
    /// leaves). Dual control; transferring to the current owner is an
    /// audited no-op.
    pub fn transfer_ownership(
        &mut self,
        key_id: &KeyId,
        new_owner: &ParticipantId,
        sessions: &[OperatorSession],
    ) -> Result<OwnershipRecord> {
        self.registry.key(key_id)?;
        self.registry.participant(new_owner)?;
        let params = DocBuilder::new()
            .text("key", key_id.as_str())
            .text("new_owner", new_owner.as_str())
            .build();
        let target_master = self
            .config
            .master
            .as_ref()
            .is_some_and(|m| m.key_id == *key_id);
        self.approve_and_audit(op::TRANSFER_OWNERSHIP, &params, sessions, target_master)?;
        let now = self.clock.now();
        let record = self.registry.transfer_ownership(key_id, new_owner, now)?.clone();
        self.save_key(key_id)?;
        Ok(record)
    }

    // --- verification -------------------------------------------------------------

    /// Validate a certification path from `leaf` to any of `anchors` at
    /// time `at`, checking signatures, validity windows and the latest CRL
    /// of every issuer on the path. Read-only and verdict-valued.
    pub fn verify_chain(
        &self,
        leaf_cert_id: &str,
        anchors: &[TrustAnchor],
        at: Timestamp,
    ) -> Result<ChainVerdict> {
        let leaf = self.certificate(leaf_cert_id)?;
        let pool: Vec<Certificate> = self
            .certs
            .values()
            .filter(|c| c.id() != leaf_cert_id)
            .cloned()
            .collect();
        struct Env<'a> {
            authority: &'a KeyAuthority,
        }
        impl ChainEnv for Env<'_> {
            fn is_revoked(&self, issuer_dn: &str, serial: u64) -> bool {
                self.authority
                    .registry
                    .issuer_by_dn(issuer_dn)
                    .and_then(|issuer| self.authority.crls.get(&issuer.participant_id))
                    .is_some_and(|crl| crl.contains(serial))
            }
            fn verify_signature(
                &self,
                algorithm: &str,
                public_key: &[u8],
                message: &[u8],
                signature: &[u8],
            ) -> bool {
                self.authority
                    .provider
                    .verify(algorithm, public_key, message, signature)
            }
        }
        Ok(chain::verify_chain(
            leaf,
            &pool,
            anchors,
            at,
            &Env { authority: self },
        ))
    }

    /// Resolve an issuer's issuing key valid at `at` into a trust anchor.
    pub fn anchor_for(&self, issuer: &ParticipantId, at: Timestamp) -> Result<TrustAnchor> {
        let issuer_record = self.registry.issuer(issuer)?;
        let key_id = issuer_record
            .valid_issuing_key(at)
            .ok_or_else(|| AuthorityError::NoValidIssuingKey(issuer.clone()))?;
        let key = self.registry.key(key_id)?;
        Ok(TrustAnchor {
            dn: issuer_record.distinguished_name.clone(),
            algorithm: key.algorithm.clone(),
            public_key: key.public_part.clone(),
        })
    }
}
