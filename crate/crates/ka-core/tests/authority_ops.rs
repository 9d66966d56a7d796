//! End-to-end exercises of the key authority operations against a real
//! on-disk repository.

use std::collections::BTreeSet;
use std::sync::Arc;

use ka_core::authority::{
    op, AuthorityError, AuthorityOptions, ChainFailure, DepositPurpose, InitReceipt, KeyAuthority,
};
use ka_core::control::{AuditVerdict, ControlError, OperatorSession};
use ka_core::crypto::{self, CryptoError, CryptoProvider, KdfParams, SoftwareProvider};
use ka_core::lifecycle::{LifecycleError, LifecycleState};
use ka_core::store::{canonical, Kind};
use ka_core::types::{Clock, InstanceId, ManualClock, OperatorId, ParticipantId, Timestamp};
use tempfile::TempDir;

const ALICE_SECRET: &str = "alice-secret-0";
const BOB_SECRET: &str = "bob-secret-0";

struct Fixture {
    _dir: TempDir,
    ka: KeyAuthority,
    clock: Arc<ManualClock>,
    receipt: InitReceipt,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = TempDir::new().unwrap();
        let clock = Arc::new(ManualClock::new(Timestamp(1_000)));
        let options = AuthorityOptions {
            kdf: KdfParams::light(),
            durable: false,
            rng_seed: Some([7u8; 32]),
            ..AuthorityOptions::default()
        };
        let (mut ka, receipt) =
            KeyAuthority::init(dir.path().join("ka"), options, clock.clone()).unwrap();
        ka.add_operator(OperatorId::new("alice"), ALICE_SECRET, &[]).unwrap();
        let alice = ka
            .authenticate_operator(&OperatorId::new("alice"), ALICE_SECRET)
            .unwrap();
        ka.add_operator(OperatorId::new("bob"), BOB_SECRET, &[alice]).unwrap();
        Fixture {
            _dir: dir,
            ka,
            clock,
            receipt,
        }
    }

    fn one(&self) -> Vec<OperatorSession> {
        vec![self
            .ka
            .authenticate_operator(&OperatorId::new("alice"), ALICE_SECRET)
            .unwrap()]
    }

    fn two(&self) -> Vec<OperatorSession> {
        vec![
            self.ka
                .authenticate_operator(&OperatorId::new("alice"), ALICE_SECRET)
                .unwrap(),
            self.ka
                .authenticate_operator(&OperatorId::new("bob"), BOB_SECRET)
                .unwrap(),
        ]
    }

    fn issuer(&mut self, dn: &str) -> ParticipantId {
        let issuer = self.ka.create_issuer(dn, &self.one()).unwrap();
        let id = issuer.participant_id.clone();
        self.ka
            .rollover_issuing_key(&id, self.clock.now(), &self.two())
            .unwrap();
        id
    }

    fn participant(&mut self, name: &str) -> ParticipantId {
        self.ka
            .add_participant(name, &self.one())
            .unwrap()
            .participant_id
    }

    fn usage() -> BTreeSet<String> {
        ["digital-signature".to_owned()].into_iter().collect()
    }
}

fn label(err: &AuthorityError) -> &'static str {
    err.label()
}

#[test]
fn issue_certificate_signs_with_the_valid_issuing_key() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();

    let cert = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(100_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();

    let issuing_key = fx
        .ka
        .registry()
        .valid_issuing_key(&issuer, fx.clock.now())
        .unwrap()
        .unwrap()
        .clone();
    assert_eq!(cert.signing_key_id, issuing_key);
    let issuer_public = fx.ka.registry().key(&issuing_key).unwrap().public_part.clone();
    let provider = SoftwareProvider::default();
    assert!(provider.verify(
        "ed25519",
        &issuer_public,
        &cert.signed_bytes(),
        &cert.signature
    ));

    let next = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(100_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();
    assert_eq!(next.serial, cert.serial + 1);
}

#[test]
fn issue_without_issuing_key_fails() {
    let mut fx = Fixture::new();
    let issuer = fx.ka.create_issuer("CN=Bare CA", &fx.one()).unwrap().participant_id;
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let err = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(2_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap_err();
    assert_eq!(label(&err), "NoValidIssuingKey");
}

#[test]
fn cross_certification_builds_a_validating_chain() {
    let mut fx = Fixture::new();
    let root = fx.issuer("CN=Root CA");
    let sub = fx.issuer("CN=Sub CA");
    let subject = fx.participant("Leaf P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&sub, &subject, "ed25519", &fx.one())
        .unwrap();

    let cross = fx
        .ka
        .issue_cross_certificate(&root, &sub, Timestamp(1_000), Timestamp(1_000_000), &fx.two())
        .unwrap();
    let leaf = fx
        .ka
        .issue_certificate(
            &sub,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(1_000_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();

    // The cross-certificate is a product of the SIGNER's core PKI.
    let product = ka_core::types::ProductId::new(format!("cert:{}", cross.id()));
    assert_eq!(fx.ka.registry().core_pki_of(&product).unwrap(), &root);

    let anchor = fx.ka.anchor_for(&root, fx.clock.now()).unwrap();
    let verdict = fx
        .ka
        .verify_chain(&leaf.id(), &[anchor], Timestamp(5_000))
        .unwrap();
    assert!(verdict.is_valid(), "verdict: {verdict:?}");

    let err = fx
        .ka
        .issue_cross_certificate(&root, &root, Timestamp(0), Timestamp(1), &fx.two())
        .unwrap_err();
    assert_eq!(label(&err), "SelfCrossCert");
}

#[test]
fn revocation_flows_into_the_next_crl() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let cert = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(1_000_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();

    let empty = fx.ka.publish_crl(&issuer, Timestamp(2_000_000), &fx.one()).unwrap();
    assert!(empty.entries.is_empty());

    fx.ka.revoke(&issuer, cert.serial, "key-compromise", &fx.one()).unwrap();
    let err = fx
        .ka
        .revoke(&issuer, cert.serial, "again", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "AlreadyRevoked");
    let err = fx.ka.revoke(&issuer, 999, "ghost", &fx.one()).unwrap_err();
    assert_eq!(label(&err), "UnknownSerial");

    let crl = fx.ka.publish_crl(&issuer, Timestamp(2_000_000), &fx.one()).unwrap();
    assert!(crl.contains(cert.serial));
    assert!(crl.this_update >= empty.this_update);

    // Revoked leaf fails chain validation with the Revoked reason.
    let anchor = fx.ka.anchor_for(&issuer, fx.clock.now()).unwrap();
    let verdict = fx
        .ka
        .verify_chain(&cert.id(), &[anchor], Timestamp(5_000))
        .unwrap();
    assert_eq!(verdict.reason(), Some(ChainFailure::Revoked));
}

#[test]
fn crl_entry_sets_are_monotone_and_sorted() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let mut serials = Vec::new();
    for _ in 0..3 {
        let cert = fx
            .ka
            .issue_certificate(
                &issuer,
                &subject,
                &key_id,
                Timestamp(1_000),
                Timestamp(1_000_000),
                Fixture::usage(),
                &fx.one(),
            )
            .unwrap();
        serials.push(cert.serial);
    }
    let mut previous: BTreeSet<u64> = BTreeSet::new();
    for serial in serials {
        fx.ka.revoke(&issuer, serial, "test", &fx.one()).unwrap();
        let crl = fx.ka.publish_crl(&issuer, Timestamp(2_000_000), &fx.one()).unwrap();
        let entries: Vec<u64> = crl.entries.iter().map(|e| e.serial).collect();
        let mut sorted = entries.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(entries, sorted, "entries sorted and unique");
        let current: BTreeSet<u64> = entries.into_iter().collect();
        assert!(current.is_superset(&previous), "crl set never shrinks");
        previous = current;
    }
    assert_eq!(previous.len(), 3);
}

#[test]
fn purpose_signing_requires_issuer_ownership() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");

    // A dedicated purpose key, held in authority custody.
    let (purpose_key, purpose_instance) = fx
        .ka
        .generate_participant_keys(&issuer, &issuer, "ed25519", &fx.one())
        .unwrap();
    fx.ka.hold_in_custody(&purpose_instance, &fx.one()).unwrap();
    let signature = fx
        .ka
        .sign_for_purpose(&issuer, &purpose_key, b"timestamp-token", &fx.one())
        .unwrap();
    let public = fx.ka.registry().key(&purpose_key).unwrap().public_part.clone();
    assert!(SoftwareProvider::default().verify("ed25519", &public, b"timestamp-token", &signature));

    // A participant's key is foreign to the issuer.
    let subject = fx.participant("Alice P");
    let (alice_key, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let err = fx
        .ka
        .sign_for_purpose(&issuer, &alice_key, b"data", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "KeyNotOwnedByIssuer");

    // Signing with the issuing key itself is allowed, audited raw-sign.
    let issuing = fx
        .ka
        .registry()
        .valid_issuing_key(&issuer, fx.clock.now())
        .unwrap()
        .unwrap()
        .clone();
    fx.ka.sign_for_purpose(&issuer, &issuing, b"raw", &fx.one()).unwrap();
    let records = fx.ka.audit_records().unwrap();
    let last = records.last().unwrap();
    assert_eq!(last.operation_name, op::SIGN_FOR_PURPOSE);
    let expected_params = canonical::DocBuilder::new()
        .text("issuer", issuer.as_str())
        .text("key", issuing.as_str())
        .bytes(
            "message_digest",
            canonical::digest(&canonical::Value::bytes(b"raw".to_vec())).to_vec(),
        )
        .text("purpose", "raw-sign")
        .build();
    assert_eq!(last.parameters_digest, canonical::digest(&expected_params).to_vec());
}

#[test]
fn generated_keys_start_storable_and_owned() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let other = fx.participant("Bob P");
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();

    let instance = fx.ka.instance(&instance_id).unwrap();
    assert_eq!(instance.state(), LifecycleState::Storable);
    let now = fx.clock.now();
    assert!(fx.ka.registry().is_own_key(&subject, &key_id, now).unwrap());
    assert!(fx.ka.registry().is_foreign_key(&other, &key_id, now).unwrap());

    let records = fx.ka.audit_records().unwrap();
    let last = records.last().unwrap();
    assert_eq!(last.operation_name, op::GENERATE_PARTICIPANT_KEYS);
    assert_eq!(last.operator_ids, vec![OperatorId::new("alice")]);
}

#[test]
fn personalize_seals_and_transitions() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let other = fx.participant("Bob P");
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();

    let err = fx.ka.personalize(&instance_id, &other, &fx.one()).unwrap_err();
    assert_eq!(label(&err), "NotOwner");

    let (pse, passphrase) = fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();
    assert_eq!(
        fx.ka.instance(&instance_id).unwrap().state(),
        LifecycleState::Deliverable
    );
    // The container opens with the one-time passphrase and carries the key.
    let opened = crypto::open_pse(&pse, passphrase.secret()).unwrap();
    assert_eq!(opened.key_id, key_id);
    let expected_public = fx.ka.registry().key(&key_id).unwrap().public_part.clone();
    assert_eq!(opened.public_part, expected_public);
    let sig = SoftwareProvider::default().sign(&opened, b"probe").unwrap();
    assert!(SoftwareProvider::default().verify("ed25519", &expected_public, b"probe", &sig));
    // Participant keys leave custody when sealed.
    assert!(!fx.ka.has_custody(&instance_id));

    let err = fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap_err();
    assert_eq!(label(&err), "IllegalTransition");
}

#[test]
fn delivery_requires_the_owner_as_recipient() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let other = fx.participant("Bob P");
    let (_, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();

    let err = fx
        .ka
        .record_delivery(&instance_id, &other, "courier", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "RecipientNotOwner");

    fx.ka
        .record_delivery(&instance_id, &subject, "courier", &fx.one())
        .unwrap();
    assert_eq!(fx.ka.instance(&instance_id).unwrap().state(), LifecycleState::Usable);

    // A deposited instance cannot be delivered.
    let (_, deposited) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka.deposit_key(&deposited, DepositPurpose::Backup, &fx.one()).unwrap();
    let err = fx
        .ka
        .record_delivery(&deposited, &subject, "courier", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "IllegalTransition");
}

#[test]
fn escrow_roundtrip_is_bit_exact_and_dual_controlled() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (_, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();

    // Copy first so one instance can be opened for comparison.
    let probe_instance = fx.ka.copy_key(&instance_id, &fx.two()).unwrap();
    let (probe_pse, probe_pass) = fx.ka.personalize(&probe_instance, &subject, &fx.one()).unwrap();
    let original = crypto::open_pse(&probe_pse, probe_pass.secret()).unwrap();
    let original_private = original.private_part.as_ref().unwrap().expose().to_vec();

    let record = fx
        .ka
        .deposit_key(&instance_id, DepositPurpose::Backup, &fx.one())
        .unwrap();
    assert_eq!(
        fx.ka.instance(&instance_id).unwrap().state(),
        LifecycleState::Deposited
    );
    // The plaintext key never appears in the repository.
    let hits = fx.ka.repository().scan_for(&original_private).unwrap();
    assert!(hits.is_empty(), "plaintext escaped to {hits:?}");

    let err = fx.ka.recover_key(&record.deposit_id, &fx.one()).unwrap_err();
    assert_eq!(label(&err), "DualControlRequired");

    let (_, recovered_instance) = fx.ka.recover_key(&record.deposit_id, &fx.two()).unwrap();
    // The deposited source stays deposited.
    assert_eq!(
        fx.ka.instance(&instance_id).unwrap().state(),
        LifecycleState::Deposited
    );
    let (rec_pse, rec_pass) = fx
        .ka
        .personalize(&recovered_instance, &subject, &fx.one())
        .unwrap();
    let recovered = crypto::open_pse(&rec_pse, rec_pass.secret()).unwrap();
    assert_eq!(
        recovered.private_part.as_ref().unwrap().expose(),
        original_private.as_slice()
    );
}

#[test]
fn tampered_deposits_fail_unwrap() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (_, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let record = fx
        .ka
        .deposit_key(&instance_id, DepositPurpose::Escrow, &fx.one())
        .unwrap();

    // Flip one bit of the wrapped payload behind the authority's back
    // (rewriting the file through the store keeps the content hash valid,
    // so only the AEAD layer can catch it).
    let repo = fx.ka.repository();
    let doc = repo.load(Kind::Deposit, record.deposit_id.as_str()).unwrap();
    let mut wrapped = doc.field("wrapped").unwrap().as_bytes().unwrap().to_vec();
    wrapped[5] ^= 0x04;
    let mut map = doc.as_map().unwrap().clone();
    map.insert("wrapped".to_owned(), canonical::Value::Bytes(wrapped));
    repo.save(Kind::Deposit, record.deposit_id.as_str(), &canonical::Value::Map(map))
        .unwrap();

    let mut reopened = KeyAuthority::open(fx.ka.repository().root(), fx.clock.clone()).unwrap();
    reopened.set_durable(false);
    reopened.unseal_master(fx.receipt.master_passphrase.secret()).unwrap();
    let mut ops = Vec::new();
    for (id, secret) in [("alice", ALICE_SECRET), ("bob", BOB_SECRET)] {
        ops.push(reopened.authenticate_operator(&OperatorId::new(id), secret).unwrap());
    }
    let err = reopened.recover_key(&record.deposit_id, &ops).unwrap_err();
    assert_eq!(label(&err), "UnwrapFailed");
}

#[test]
fn copy_respects_token_capabilities() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();

    // Storable soft key: copying yields two live instances of one key.
    let copy_id = fx.ka.copy_key(&instance_id, &fx.two()).unwrap();
    assert_eq!(fx.ka.instance(&copy_id).unwrap().key_id(), &key_id);
    assert_eq!(fx.ka.instance(&copy_id).unwrap().state(), LifecycleState::Storable);
    assert_eq!(fx.ka.instance(&instance_id).unwrap().state(), LifecycleState::Storable);

    let err = fx.ka.copy_key(&instance_id, &fx.one()).unwrap_err();
    assert_eq!(label(&err), "DualControlRequired");

    // A delivered participant key: the authority holds no material.
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();
    fx.ka
        .record_delivery(&instance_id, &subject, "courier", &fx.one())
        .unwrap();
    let err = fx.ka.copy_key(&instance_id, &fx.two()).unwrap_err();
    assert_eq!(label(&err), "ExportForbidden");

    // A deposited instance is never a copy source.
    fx.ka.deposit_key(&copy_id, DepositPurpose::Backup, &fx.one()).unwrap();
    let err = fx.ka.copy_key(&copy_id, &fx.two()).unwrap_err();
    assert_eq!(label(&err), "SourceNotCopyable");

    // A non-exporting provider marks its keys accordingly; usable
    // authority-held keys of that provider refuse export.
    fx.ka.set_provider(Box::new(SoftwareProvider::sealed()));
    let (_, sealed_instance) = fx
        .ka
        .generate_participant_keys(&issuer, &issuer, "ed25519", &fx.one())
        .unwrap();
    fx.ka.hold_in_custody(&sealed_instance, &fx.one()).unwrap();
    let err = fx.ka.copy_key(&sealed_instance, &fx.two()).unwrap_err();
    assert_eq!(label(&err), "ExportForbidden");
}

#[test]
fn destruction_is_per_instance_and_final() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (_, instance_a) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let instance_b = fx.ka.copy_key(&instance_a, &fx.two()).unwrap();

    fx.ka.destroy_key(&instance_a, &fx.two()).unwrap();
    let gone = fx.ka.instance(&instance_a).unwrap();
    assert!(gone.retired());
    assert_eq!(gone.state(), LifecycleState::NonExisting);
    let err = fx.ka.destroy_key(&instance_a, &fx.two()).unwrap_err();
    assert_eq!(label(&err), "InstanceRetired");

    // The sibling instance is untouched.
    assert_eq!(fx.ka.instance(&instance_b).unwrap().state(), LifecycleState::Storable);

    // Destroying a deposited instance shreds its deposit.
    let record = fx
        .ka
        .deposit_key(&instance_b, DepositPurpose::Backup, &fx.one())
        .unwrap();
    fx.ka.destroy_key(&instance_b, &fx.two()).unwrap();
    let err = fx.ka.recover_key(&record.deposit_id, &fx.two()).unwrap_err();
    assert_eq!(label(&err), "UnknownDeposit");
}

#[test]
fn ownership_transfer_is_dual_controlled_and_idempotent() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let alice = fx.participant("Alice P");
    let boss = fx.participant("Superior P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &alice, "ed25519", &fx.one())
        .unwrap();

    let err = fx
        .ka
        .transfer_ownership(&key_id, &boss, &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "DualControlRequired");

    let audit_before = fx.ka.audit_records().unwrap().len();
    fx.ka.transfer_ownership(&key_id, &boss, &fx.two()).unwrap();
    let now = fx.clock.now();
    assert!(fx.ka.registry().is_own_key(&boss, &key_id, now).unwrap());
    assert!(!fx.ka.registry().is_own_key(&alice, &key_id, now).unwrap());

    // Transfer to the current owner: audited no-op.
    fx.ka.transfer_ownership(&key_id, &boss, &fx.two()).unwrap();
    assert_eq!(fx.ka.registry().key(&key_id).unwrap().ownership.len(), 2);
    assert_eq!(fx.ka.audit_records().unwrap().len(), audit_before + 2);
}

#[test]
fn chain_verdicts_cover_expiry_and_missing_paths() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let cert = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(2_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();
    let anchor = fx.ka.anchor_for(&issuer, fx.clock.now()).unwrap();

    let valid = fx.ka.verify_chain(&cert.id(), std::slice::from_ref(&anchor), Timestamp(1_500)).unwrap();
    assert!(valid.is_valid());
    let expired = fx.ka.verify_chain(&cert.id(), std::slice::from_ref(&anchor), Timestamp(2_000)).unwrap();
    assert_eq!(expired.reason(), Some(ChainFailure::Expired));
    let early = fx.ka.verify_chain(&cert.id(), &[anchor], Timestamp(500)).unwrap();
    assert_eq!(early.reason(), Some(ChainFailure::NotYetValid));

    let stranger = ka_core::authority::TrustAnchor {
        dn: "CN=Unrelated".into(),
        algorithm: "ed25519".into(),
        public_key: vec![0u8; 32],
    };
    let lost = fx.ka.verify_chain(&cert.id(), &[stranger], Timestamp(1_500)).unwrap();
    assert_eq!(lost.reason(), Some(ChainFailure::NoPathToAnchor));
}

#[test]
fn audit_chain_verifies_and_detects_truncation() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let _ = issuer;
    assert!(matches!(fx.ka.verify_audit().unwrap(), AuditVerdict::Valid { .. }));

    // Truncate the log by one line; the registered head catches it.
    let path = fx.ka.repository().audit_path();
    let contents = std::fs::read(&path).unwrap();
    let lines: Vec<&[u8]> = contents.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
    let mut truncated: Vec<u8> = Vec::new();
    for line in &lines[..lines.len() - 1] {
        truncated.extend_from_slice(line);
        truncated.push(b'\n');
    }
    std::fs::write(&path, truncated).unwrap();
    let verdict = fx.ka.verify_audit().unwrap();
    assert!(!verdict.is_valid(), "truncation must be detected");
}

#[test]
fn reopened_repository_replays_to_the_same_state() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();
    let cert = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(9_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();

    let reopened = KeyAuthority::open(fx.ka.repository().root(), fx.clock.clone()).unwrap();
    assert_eq!(
        reopened.instance(&instance_id).unwrap(),
        fx.ka.instance(&instance_id).unwrap()
    );
    assert_eq!(
        reopened.certificate(&cert.id()).unwrap(),
        fx.ka.certificate(&cert.id()).unwrap()
    );
    assert_eq!(reopened.config(), fx.ka.config());
    // Without the master passphrase the reopened authority cannot touch
    // wrapped material.
    let mut reopened = reopened;
    let err = reopened
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "MasterKeyUnavailable");
    reopened.unseal_master(fx.receipt.master_passphrase.secret()).unwrap();
    reopened
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
}

#[test]
fn wrong_master_passphrase_is_rejected() {
    let fx = Fixture::new();
    let mut reopened = KeyAuthority::open(fx.ka.repository().root(), fx.clock.clone()).unwrap();
    let err = reopened.unseal_master("not the passphrase").unwrap_err();
    assert_eq!(label(&err), "AuthenticationFailed");
}

#[test]
fn private_reads_of_issuer_or_foreign_keys_are_audited() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(9_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();

    let audited: BTreeSet<String> = fx
        .ka
        .audit_records()
        .unwrap()
        .into_iter()
        .map(|r| r.operation_name)
        .collect();
    let master_key = fx.ka.master_ref().unwrap().key_id.clone();
    for (op_name, key) in fx.ka.private_read_log() {
        if *key == master_key {
            continue; // the authority's own key
        }
        assert!(
            audited.contains(op_name),
            "private read in {op_name} lacks an audit record"
        );
    }
    // And the log is not trivially empty: issuing and personalization read.
    assert!(fx
        .ka
        .private_read_log()
        .iter()
        .any(|(op_name, _)| op_name == op::ISSUE_CERTIFICATE));
    assert!(fx
        .ka
        .private_read_log()
        .iter()
        .any(|(op_name, _)| op_name == op::PERSONALIZE));
}

#[test]
fn instance_histories_survive_and_replay() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    // Rollover used the full generate→store→deliver path; the issuing
    // instance has a replayable history with a use entry per signature.
    let issuing = fx
        .ka
        .registry()
        .valid_issuing_key(&issuer, fx.clock.now())
        .unwrap()
        .unwrap()
        .clone();
    let subject = fx.participant("Alice P");
    let (key_id, _) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(9_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();

    let serving = fx
        .ka
        .instances()
        .find(|i| i.key_id() == &issuing)
        .unwrap();
    assert_eq!(serving.state(), LifecycleState::Usable);
    assert_eq!(serving.use_count(), 1);

    let replayed = ka_core::lifecycle::KeyInstance::replay(
        serving.instance_id().clone(),
        serving.key_id().clone(),
        serving.origin().clone(),
        serving.history().to_vec(),
    )
    .unwrap();
    assert_eq!(&replayed, serving);
}

#[test]
fn errors_do_not_consume_audit_sequence() {
    let mut fx = Fixture::new();
    let before = fx.ka.audit_records().unwrap().len();
    let err = fx.ka.create_issuer("", &fx.one()).unwrap_err();
    assert_eq!(label(&err), "InvalidDistinguishedName");
    let err = fx
        .ka
        .recover_key(&ka_core::types::DepositId::new("d-none"), &fx.two())
        .unwrap_err();
    assert_eq!(label(&err), "UnknownDeposit");
    let err = fx
        .ka
        .instance(&InstanceId::new("x-none"))
        .map(|_| ())
        .unwrap_err();
    assert_eq!(label(&err), "UnknownInstance");
    assert_eq!(fx.ka.audit_records().unwrap().len(), before);
    assert!(matches!(fx.ka.verify_audit().unwrap(), AuditVerdict::Valid { .. }));
}

#[test]
fn every_privileged_operation_appends_exactly_one_audit_record() {
    let mut fx = Fixture::new();
    // Baseline: init + two operator additions.
    assert_eq!(fx.ka.audit_records().unwrap().len(), 3);

    let issuer = fx.ka.create_issuer("CN=Count CA", &fx.one()).unwrap().participant_id;
    fx.ka
        .rollover_issuing_key(&issuer, fx.clock.now(), &fx.two())
        .unwrap();
    let subject = fx.ka.add_participant("Count P", &fx.one()).unwrap().participant_id;
    let (key_id, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let cert = fx
        .ka
        .issue_certificate(
            &issuer,
            &subject,
            &key_id,
            Timestamp(1_000),
            Timestamp(9_000),
            Fixture::usage(),
            &fx.one(),
        )
        .unwrap();
    fx.ka.revoke(&issuer, cert.serial, "count", &fx.one()).unwrap();
    fx.ka.publish_crl(&issuer, Timestamp(9_000), &fx.one()).unwrap();
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();
    fx.ka
        .record_delivery(&instance_id, &subject, "courier", &fx.one())
        .unwrap();

    // Nine privileged operations, nine more records, in order.
    let records = fx.ka.audit_records().unwrap();
    assert_eq!(records.len(), 12);
    let names: Vec<&str> = records.iter().map(|r| r.operation_name.as_str()).collect();
    assert_eq!(
        names,
        vec![
            op::INIT,
            op::OPERATOR_ADD,
            op::OPERATOR_ADD,
            op::ISSUER_CREATE,
            op::ROLLOVER_ISSUING_KEY,
            op::PARTICIPANT_ADD,
            op::GENERATE_PARTICIPANT_KEYS,
            op::ISSUE_CERTIFICATE,
            op::REVOKE,
            op::PUBLISH_CRL,
            op::PERSONALIZE,
            op::RECORD_DELIVERY,
        ]
    );
}

#[test]
fn dual_control_rejects_duplicate_approvers() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (_, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    let alice_twice = vec![fx.one().remove(0), fx.one().remove(0)];
    let err = fx.ka.copy_key(&instance_id, &alice_twice).unwrap_err();
    assert!(matches!(
        err,
        AuthorityError::Control(ControlError::DualControlRequired { required: 2, distinct: 1 })
    ));
}

#[test]
fn weak_parameters_and_unknown_algorithms_surface() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let err = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "rsa-512", &fx.one())
        .unwrap_err();
    assert_eq!(label(&err), "UnsupportedAlgorithm");

    fx.ka.set_provider(Box::new(SoftwareProvider::new(256, true)));
    let err = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap_err();
    assert!(matches!(
        err,
        AuthorityError::Crypto(CryptoError::WeakParameters { .. })
    ));
    assert_eq!(label(&err), "WeakParameters");
}

#[test]
fn deposit_requires_storable_state() {
    let mut fx = Fixture::new();
    let issuer = fx.issuer("CN=Root CA");
    let subject = fx.participant("Alice P");
    let (_, instance_id) = fx
        .ka
        .generate_participant_keys(&issuer, &subject, "ed25519", &fx.one())
        .unwrap();
    fx.ka.personalize(&instance_id, &subject, &fx.one()).unwrap();
    fx.ka
        .record_delivery(&instance_id, &subject, "courier", &fx.one())
        .unwrap();
    // A usable instance must be copied first, not deposited.
    let err = fx
        .ka
        .deposit_key(&instance_id, DepositPurpose::Backup, &fx.one())
        .unwrap_err();
    assert!(matches!(
        err,
        AuthorityError::Lifecycle(LifecycleError::IllegalTransition { .. })
    ));
}

#[test]
fn hosted_core_authorities_track_issuers() {
    let mut fx = Fixture::new();
    assert!(fx.ka.config().hosted_core_authorities.is_empty());
    let a = fx.issuer("CN=A");
    let b = fx.issuer("CN=B");
    let hosted = &fx.ka.config().hosted_core_authorities;
    assert_eq!(hosted.len(), 2);
    assert!(hosted.contains(&a) && hosted.contains(&b));
    let err = fx.ka.create_issuer("CN=A", &fx.one()).unwrap_err();
    assert_eq!(label(&err), "DuplicateDistinguishedName");
}
