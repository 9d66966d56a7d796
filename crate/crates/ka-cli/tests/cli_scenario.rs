//! Drives the complete operator workflow through the real binary:
//! init → operators → issuer → rollover → keygen → personalize → deliver
//! → issue → revoke → crl publish → verify-chain → deposit → recover →
//! copy → transfer-owner → destroy → audit verify, checking exit codes,
//! error labels and machine output along the way.

mod common;

use std::os::unix::io::AsRawFd;

use common::{int, text, Ka};
use ka_core::store::canonical;

struct Scenario {
    _dir: tempfile::TempDir,
    ka: Ka,
    alice_cred: String,
    bob_cred: String,
}

impl Scenario {
    fn new() -> Scenario {
        let dir = tempfile::TempDir::new().unwrap();
        let ka = Ka::new(dir.path());
        let alice_cred = dir.path().join("alice.cred");
        let bob_cred = dir.path().join("bob.cred");
        std::fs::write(&alice_cred, "alice-secret").unwrap();
        std::fs::write(&bob_cred, "bob-secret").unwrap();

        let doc = ka.json(&["init", "--authority-id", "scenario-ka", "--kdf-profile", "light"]);
        std::fs::write(&ka.master_pass_file, text(&doc, "master_passphrase")).unwrap();

        let alice_cred = alice_cred.to_str().unwrap().to_owned();
        let bob_cred = bob_cred.to_str().unwrap().to_owned();
        ka.json(&["operator", "add", "--id", "alice", "--secret-file", &alice_cred]);
        let mut args = vec!["operator", "add", "--id", "bob", "--secret-file", &bob_cred];
        args.extend(ka.approve("alice", &alice_cred));
        ka.json(&args);

        Scenario {
            _dir: dir,
            ka,
            alice_cred,
            bob_cred,
        }
    }

    fn one<'a>(&'a self, args: &mut Vec<&'a str>) {
        args.extend(self.ka.approve("alice", &self.alice_cred));
    }

    fn two<'a>(&'a self, args: &mut Vec<&'a str>) {
        args.extend(self.ka.approve("alice", &self.alice_cred));
        args.extend(self.ka.approve("bob", &self.bob_cred));
    }

    fn master<'a>(&'a self, args: &mut Vec<&'a str>) {
        args.push("--master-passphrase-file");
        args.push(self.ka.master_pass_file.to_str().unwrap());
    }
}

#[test]
fn full_operator_workflow() {
    let sc = Scenario::new();
    let ka = &sc.ka;

    // Issuer with a DN; duplicates carry the stable label on exit 1.
    let mut args = vec!["issuer", "create", "--dn", "CN=Root"];
    sc.one(&mut args);
    let issuer = text(&ka.json(&args), "issuer_id");
    let mut args = vec!["issuer", "create", "--dn", "CN=Root"];
    sc.one(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("DuplicateDistinguishedName"), "stderr: {stderr}");

    // Rollover needs two distinct operators.
    let mut args = vec!["issuer", "rollover", "--issuer", &issuer];
    sc.one(&mut args);
    sc.master(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("DualControlRequired"), "stderr: {stderr}");
    let mut args = vec!["issuer", "rollover", "--issuer", &issuer];
    sc.two(&mut args);
    sc.master(&mut args);
    ka.json(&args);

    // Participant and key.
    let mut args = vec!["participant", "add", "--name", "Alice Person"];
    sc.one(&mut args);
    let subject = text(&ka.json(&args), "participant_id");
    let mut args = vec!["keygen", "--issuer", &issuer, "--owner", &subject];
    sc.one(&mut args);
    sc.master(&mut args);
    let keydoc = ka.json(&args);
    let key = text(&keydoc, "key_id");
    let instance = text(&keydoc, "instance_id");

    // Personalize reveals the passphrase exactly once; deliver to owner.
    let mut args = vec!["personalize", "--instance", &instance, "--subject", &subject];
    sc.one(&mut args);
    sc.master(&mut args);
    let persdoc = ka.json(&args);
    let passphrase = text(&persdoc, "passphrase");
    assert_eq!(passphrase.chars().count(), 16);
    let mut args = vec![
        "deliver",
        "--instance",
        &instance,
        "--recipient",
        &subject,
        "--channel",
        "courier",
    ];
    sc.one(&mut args);
    let deldoc = ka.json(&args);
    assert_eq!(text(&deldoc, "state"), "usable");

    // Issue a certificate bracketing "now", then verify the chain.
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .as_secs() as i64;
    let from = (now - 60).to_string();
    let to = (now + 86_400).to_string();
    let mut args = vec![
        "issue",
        "--issuer",
        &issuer,
        "--subject",
        &subject,
        "--key",
        &key,
        "--valid-from",
        &from,
        "--valid-to",
        &to,
    ];
    sc.one(&mut args);
    sc.master(&mut args);
    let cert_id = text(&ka.json(&args), "cert_id");

    let verdict = ka.json(&["verify-chain", "--leaf", &cert_id, "--anchor", &issuer]);
    assert_eq!(int(&verdict, "valid"), 1);

    // Revoke, publish, verify again: exit 0 with a negative verdict.
    let serial = cert_id.rsplit('-').next().unwrap().to_owned();
    let mut args = vec![
        "revoke",
        "--issuer",
        &issuer,
        "--serial",
        &serial,
        "--reason",
        "key-compromise",
    ];
    sc.one(&mut args);
    ka.json(&args);
    let next_update = (now + 86_400).to_string();
    let mut args = vec!["crl", "publish", "--issuer", &issuer, "--next-update", &next_update];
    sc.one(&mut args);
    sc.master(&mut args);
    let crldoc = ka.json(&args);
    assert_eq!(
        crldoc.field("crl").unwrap().field("entries").unwrap().as_list().unwrap().len(),
        1
    );
    let verdict = ka.json(&["verify-chain", "--leaf", &cert_id, "--anchor", &issuer]);
    assert_eq!(int(&verdict, "valid"), 0);
    assert_eq!(text(&verdict, "reason"), "Revoked");

    // Escrow: deposit, failed single recovery, dual recovery, copy.
    let mut args = vec!["keygen", "--issuer", &issuer, "--owner", &subject];
    sc.one(&mut args);
    sc.master(&mut args);
    let key2doc = ka.json(&args);
    let instance2 = text(&key2doc, "instance_id");
    let key2 = text(&key2doc, "key_id");

    let mut args = vec!["copy", "--instance", &instance2];
    sc.two(&mut args);
    sc.master(&mut args);
    let copydoc = ka.json(&args);
    let copy_instance = text(&copydoc, "instance_id");

    let mut args = vec!["deposit", "--instance", &instance2, "--purpose", "escrow"];
    sc.one(&mut args);
    sc.master(&mut args);
    let depdoc = ka.json(&args);
    let deposit = text(&depdoc, "deposit_id");

    let mut args = vec!["recover", "--deposit", &deposit];
    sc.one(&mut args);
    sc.master(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("DualControlRequired"), "stderr: {stderr}");
    let mut args = vec!["recover", "--deposit", &deposit];
    sc.two(&mut args);
    sc.master(&mut args);
    let recdoc = ka.json(&args);
    assert_eq!(text(&recdoc, "key_id"), key2);
    let recovered_instance = text(&recdoc, "instance_id");

    // Ownership transfer to a superior (dual control).
    let mut args = vec!["participant", "add", "--name", "Superior"];
    sc.one(&mut args);
    let boss = text(&ka.json(&args), "participant_id");
    let mut args = vec!["transfer-owner", "--key", &key2, "--new-owner", &boss];
    sc.two(&mut args);
    let owndoc = ka.json(&args);
    assert_eq!(text(&owndoc, "owner"), boss);

    // Destroy the recovered instance; the retired machine refuses more.
    let mut args = vec!["destroy", "--instance", &recovered_instance];
    sc.two(&mut args);
    ka.json(&args);
    let mut args = vec!["destroy", "--instance", &recovered_instance];
    sc.two(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("InstanceRetired"), "stderr: {stderr}");
    let _ = copy_instance;

    // The audit chain stands at the end of the whole workflow.
    let auditdoc = ka.json(&["audit", "verify"]);
    assert_eq!(int(&auditdoc, "valid"), 1);
    assert!(int(&auditdoc, "records") >= 18);
}

#[test]
fn cross_issue_builds_a_two_issuer_chain() {
    let sc = Scenario::new();
    let ka = &sc.ka;
    let mut args = vec!["issuer", "create", "--dn", "CN=Cross Root"];
    sc.one(&mut args);
    let root = text(&ka.json(&args), "issuer_id");
    let mut args = vec!["issuer", "create", "--dn", "CN=Cross Sub"];
    sc.one(&mut args);
    let sub = text(&ka.json(&args), "issuer_id");
    for issuer in [&root, &sub] {
        let mut args = vec!["issuer", "rollover", "--issuer", issuer];
        sc.two(&mut args);
        sc.master(&mut args);
        ka.json(&args);
    }

    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .as_secs() as i64;
    let from = (now - 60).to_string();
    let to = (now + 86_400).to_string();
    let mut args = vec![
        "cross-issue",
        "--signer",
        &root,
        "--subject-issuer",
        &sub,
        "--valid-from",
        &from,
        "--valid-to",
        &to,
    ];
    sc.one(&mut args);
    sc.master(&mut args);
    ka.json(&args);

    let mut args = vec!["participant", "add", "--name", "Cross Person"];
    sc.one(&mut args);
    let subject = text(&ka.json(&args), "participant_id");
    let mut args = vec!["keygen", "--issuer", &sub, "--owner", &subject];
    sc.one(&mut args);
    sc.master(&mut args);
    let key = text(&ka.json(&args), "key_id");
    let mut args = vec![
        "issue",
        "--issuer",
        &sub,
        "--subject",
        &subject,
        "--key",
        &key,
        "--valid-from",
        &from,
        "--valid-to",
        &to,
    ];
    sc.one(&mut args);
    sc.master(&mut args);
    let leaf = text(&ka.json(&args), "cert_id");

    // Leaf issued by the sub CA validates against the root anchor through
    // the cross-certificate.
    let verdict = ka.json(&["verify-chain", "--leaf", &leaf, "--anchor", &root]);
    assert_eq!(int(&verdict, "valid"), 1);

    // Self cross-certification is rejected.
    let mut args = vec![
        "cross-issue",
        "--signer",
        &root,
        "--subject-issuer",
        &root,
        "--valid-from",
        &from,
        "--valid-to",
        &to,
    ];
    sc.one(&mut args);
    sc.master(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("SelfCrossCert"), "stderr: {stderr}");
}

#[test]
fn show_output_round_trips_through_canonical_decode() {
    let sc = Scenario::new();
    let ka = &sc.ka;
    let mut args = vec!["issuer", "create", "--dn", "CN=Show"];
    sc.one(&mut args);
    let issuer = text(&ka.json(&args), "issuer_id");

    let mut full = vec!["--json", "show", "issuer", &issuer];
    let output = ka.raw(&full);
    assert!(output.status.success());
    let doc = canonical::decode(&output.stdout).expect("round-trips");
    assert_eq!(text(&doc, "participant_id"), issuer);
    assert_eq!(canonical::encode(&doc), output.stdout);

    // Exactly one document and nothing else on stdout.
    full = vec!["--json", "show", "config"];
    let output = ka.raw(&full);
    let doc = canonical::decode(&output.stdout).expect("config round-trips");
    assert_eq!(text(&doc, "authority_id"), "scenario-ka");
}

#[test]
fn unknown_objects_exit_one_with_labels() {
    let sc = Scenario::new();
    let ka = &sc.ka;
    let (code, stderr) = ka.expect_fail(&["show", "cert", "i-missing-1"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("NotFound"), "stderr: {stderr}");

    let mut args = vec!["deliver", "--instance", "x-missing", "--recipient", "p-x"];
    sc.one(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("UnknownInstance"), "stderr: {stderr}");

    // Usage errors exit 2.
    let (code, _) = ka.expect_fail(&["issue", "--issuer", "i-x"]);
    assert_eq!(code, 2);
}

#[test]
fn bad_operator_credentials_are_rejected() {
    let sc = Scenario::new();
    let ka = &sc.ka;
    let bad = sc._dir.path().join("bad.cred");
    std::fs::write(&bad, "wrong").unwrap();
    let bad = bad.to_str().unwrap();
    let mut args = vec!["issuer", "create", "--dn", "CN=Nope"];
    args.extend(ka.approve("alice", bad));
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("AuthenticationFailed"), "stderr: {stderr}");

    let mut args = vec!["issuer", "create", "--dn", "CN=Nope"];
    args.extend(ka.approve("mallory", bad));
    let (_, stderr) = ka.expect_fail(&args);
    assert!(stderr.contains("UnknownOperator"), "stderr: {stderr}");
}

#[test]
fn concurrent_invocations_fail_fast_with_repo_locked() {
    let sc = Scenario::new();
    let ka = &sc.ka;

    // Hold the lock the way another invocation would.
    let lock_path = sc._dir.path().join("repo.lock");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .unwrap();
    assert_eq!(unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) }, 0);

    let (code, stderr) = ka.expect_fail(&["show", "config"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("RepoLocked"), "stderr: {stderr}");

    unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_UN) };
    let output = ka.raw(&["show", "config"]);
    assert!(output.status.success());
}

#[test]
fn master_passphrase_gates_wrapped_material() {
    let sc = Scenario::new();
    let ka = &sc.ka;
    let mut args = vec!["issuer", "create", "--dn", "CN=Gate"];
    sc.one(&mut args);
    let issuer = text(&ka.json(&args), "issuer_id");

    // Without the passphrase the engine cannot unwrap anything.
    let mut args = vec!["issuer", "rollover", "--issuer", &issuer];
    sc.two(&mut args);
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("MasterKeyUnavailable"), "stderr: {stderr}");

    // A wrong passphrase is authentication failure, not silence.
    let wrong = sc._dir.path().join("wrong.pass");
    std::fs::write(&wrong, "not-the-passphrase").unwrap();
    let mut args = vec!["issuer", "rollover", "--issuer", &issuer];
    sc.two(&mut args);
    args.push("--master-passphrase-file");
    args.push(wrong.to_str().unwrap());
    let (code, stderr) = ka.expect_fail(&args);
    assert_eq!(code, 1);
    assert!(stderr.contains("AuthenticationFailed"), "stderr: {stderr}");
}
