//! `ka` — operator command surface for the key authority.
//!
//! A single local tool over a repository directory (`--repo`, or
//! `KA_REPO`, default `./ka-repo`); no daemon, no network. Dual-control
//! commands take repeated `--approver NAME` with a matching
//! `--credential-file PATH` each (or an interactive no-echo prompt).
//! Exit codes: 0 success (including negative verdicts), 1 domain error
//! with a stable machine-readable label, 2 usage error. `--json` emits
//! exactly one canonical document on stdout and nothing else.

mod lock;
mod prompt;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zeroize::Zeroize;

use ka_core::authority::{
    AuthorityError, AuthorityOptions, ChainVerdict, DepositPurpose, KeyAuthority, TrustAnchor,
};
use ka_core::control::OperatorSession;
use ka_core::crypto::KdfParams;
use ka_core::store::canonical::{self, DocBuilder, Value};
use ka_core::store::Kind;
use ka_core::types::{
    Clock, DepositId, InstanceId, KeyId, OperatorId, ParticipantId, SystemClock, Timestamp,
};

#[derive(Parser)]
#[command(name = "ka", version, about = "Key authority operator tool")]
struct Cli {
    /// Repository directory.
    #[arg(long, global = true, env = "KA_REPO", default_value = "./ka-repo")]
    repo: PathBuf,

    /// Emit exactly one canonical document on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Queue on the repository lock instead of failing fast.
    #[arg(long, global = true)]
    wait_lock: bool,

    /// File holding the master passphrase; required by commands that touch
    /// wrapped key material.
    #[arg(long, global = true, env = "KA_MASTER_PASSPHRASE_FILE")]
    master_passphrase_file: Option<PathBuf>,

    /// Approving operator id; repeat for dual control.
    #[arg(long = "approver", global = true)]
    approvers: Vec<String>,

    /// Credential file for the approver at the same position; prompts on
    /// the terminal when omitted.
    #[arg(long = "credential-file", global = true)]
    credential_files: Vec<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a fresh repository and its master key.
    Init(InitArgs),
    /// Operator management.
    Operator {
        #[command(subcommand)]
        command: OperatorCommand,
    },
    /// Issuer management.
    Issuer {
        #[command(subcommand)]
        command: IssuerCommand,
    },
    /// Participant management.
    Participant {
        #[command(subcommand)]
        command: ParticipantCommand,
    },
    /// Generate a key pair for a participant (storable, authority custody).
    Keygen(KeygenArgs),
    /// Issue a certificate over a registered key.
    Issue(IssueArgs),
    /// Cross-certify another issuer's current issuing key.
    CrossIssue(CrossIssueArgs),
    /// Mark a certificate revoked.
    Revoke(RevokeArgs),
    /// Certificate revocation lists.
    Crl {
        #[command(subcommand)]
        command: CrlCommand,
    },
    /// Seal a storable instance into a PSE for its owner.
    Personalize(PersonalizeArgs),
    /// Record that a token reached its participant.
    Deliver(DeliverArgs),
    /// Escrow a storable instance under the master key.
    Deposit(DepositArgs),
    /// Recover a deposit into a new instance (dual control).
    Recover(RecoverArgs),
    /// Copy a live instance (dual control).
    Copy(CopyArgs),
    /// Destroy an instance irrecoverably (dual control).
    Destroy(DestroyArgs),
    /// Transfer key ownership (dual control).
    TransferOwner(TransferArgs),
    /// Validate a certification path against trust anchors.
    VerifyChain(VerifyChainArgs),
    /// Audit log inspection.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Print one stored object as a canonical document.
    Show(ShowArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KdfProfile {
    /// Production-grade argon2id parameters.
    Default,
    /// Cheap parameters for scripted runs (recorded in every header).
    Light,
}

#[derive(Args)]
struct InitArgs {
    /// Name of this key authority.
    #[arg(long, default_value = "ka")]
    authority_id: String,
    #[arg(long, value_enum, default_value_t = KdfProfile::Default)]
    kdf_profile: KdfProfile,
    /// Record the authority as running offline (organizational measure).
    #[arg(long, default_value_t = true)]
    offline_mode: bool,
}

#[derive(Subcommand)]
enum OperatorCommand {
    /// Register an operator. The first one bootstraps with no approver.
    Add {
        /// New operator id.
        #[arg(long)]
        id: String,
        /// File holding the new operator's secret.
        #[arg(long)]
        secret_file: PathBuf,
    },
}

#[derive(Subcommand)]
enum IssuerCommand {
    /// Create an issuer with a fresh distinguished name.
    Create {
        #[arg(long)]
        dn: String,
    },
    /// Generate a new issuing key and make it valid from --effective
    /// (dual control).
    Rollover {
        #[arg(long)]
        issuer: String,
        /// Seconds since the epoch; defaults to now.
        #[arg(long)]
        effective: Option<i64>,
    },
}

#[derive(Subcommand)]
enum ParticipantCommand {
    Add {
        #[arg(long)]
        name: String,
    },
}

#[derive(Args)]
struct KeygenArgs {
    /// Core PKI (issuer) the key pair belongs to.
    #[arg(long)]
    issuer: String,
    /// Owning participant.
    #[arg(long)]
    owner: String,
    #[arg(long, default_value = "ed25519")]
    algorithm: String,
}

#[derive(Args)]
struct IssueArgs {
    #[arg(long)]
    issuer: String,
    #[arg(long)]
    subject: String,
    /// The subject's registered key.
    #[arg(long)]
    key: String,
    #[arg(long)]
    valid_from: i64,
    #[arg(long)]
    valid_to: i64,
    /// Key usage labels; repeatable.
    #[arg(long = "usage", default_value = "digital-signature")]
    usage: Vec<String>,
}

#[derive(Args)]
struct CrossIssueArgs {
    #[arg(long)]
    signer: String,
    #[arg(long)]
    subject_issuer: String,
    #[arg(long)]
    valid_from: i64,
    #[arg(long)]
    valid_to: i64,
}

#[derive(Args)]
struct RevokeArgs {
    #[arg(long)]
    issuer: String,
    #[arg(long)]
    serial: u64,
    #[arg(long, default_value = "unspecified")]
    reason: String,
}

#[derive(Subcommand)]
enum CrlCommand {
    /// Sign a full CRL over the current revocation set.
    Publish {
        #[arg(long)]
        issuer: String,
        #[arg(long)]
        next_update: i64,
    },
}

#[derive(Args)]
struct PersonalizeArgs {
    #[arg(long)]
    instance: String,
    /// The owner the PSE is bound to.
    #[arg(long)]
    subject: String,
    /// Also write the sealed container to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeliverArgs {
    #[arg(long)]
    instance: String,
    #[arg(long)]
    recipient: String,
    #[arg(long, default_value = "operator-handover")]
    channel: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum PurposeArg {
    Backup,
    Archive,
    Escrow,
}

#[derive(Args)]
struct DepositArgs {
    #[arg(long)]
    instance: String,
    #[arg(long, value_enum, default_value_t = PurposeArg::Backup)]
    purpose: PurposeArg,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    deposit: String,
}

#[derive(Args)]
struct CopyArgs {
    #[arg(long)]
    instance: String,
}

#[derive(Args)]
struct DestroyArgs {
    #[arg(long)]
    instance: String,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    key: String,
    #[arg(long)]
    new_owner: String,
}

#[derive(Args)]
struct VerifyChainArgs {
    /// Certificate id of the leaf (issuer id + "-" + serial).
    #[arg(long)]
    leaf: String,
    /// Issuer whose issuing key (valid at --at) anchors trust; repeatable.
    #[arg(long = "anchor", required = true)]
    anchors: Vec<String>,
    /// Evaluation instant; defaults to now.
    #[arg(long)]
    at: Option<i64>,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Recompute every hash and link of the audit chain.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShowKind {
    Issuer,
    Participant,
    Key,
    Instance,
    Deposit,
    Cert,
    Crl,
    Pse,
    Operator,
    Config,
}

#[derive(Args)]
struct ShowArgs {
    #[arg(value_enum)]
    kind: ShowKind,
    /// Object id (ignored for config).
    id: Option<String>,
}

enum CliError {
    Authority(AuthorityError),
    Locked,
    Usage(String),
    Io(std::io::Error),
}

impl From<AuthorityError> for CliError {
    fn from(e: AuthorityError) -> Self {
        CliError::Authority(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn label(&self) -> &'static str {
        match self {
            CliError::Authority(e) => e.label(),
            CliError::Locked => "RepoLocked",
            CliError::Usage(_) => "UsageError",
            CliError::Io(_) => "IoError",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Authority(e) => e.to_string(),
            CliError::Locked => "repository is locked by another invocation".to_owned(),
            CliError::Usage(msg) => msg.clone(),
            CliError::Io(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Command outcome: a canonical document for `--json` plus human lines.
struct Outcome {
    doc: Value,
    human: Vec<String>,
}

impl Outcome {
    fn new(doc: Value) -> Outcome {
        Outcome {
            doc,
            human: Vec::new(),
        }
    }

    fn line(mut self, line: impl Into<String>) -> Outcome {
        self.human.push(line.into());
        self
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(outcome) => {
            if json {
                use std::io::Write;
                let bytes = canonical::encode(&outcome.doc);
                std::io::stdout().write_all(&bytes).expect("stdout");
            } else {
                for line in &outcome.human {
                    println!("{line}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}: {}", err.label(), err.message());
            if json {
                use std::io::Write;
                let doc = DocBuilder::new()
                    .text("error", err.label())
                    .text("message", err.message())
                    .build();
                std::io::stdout()
                    .write_all(&canonical::encode(&doc))
                    .expect("stdout");
            }
            ExitCode::from(err.exit_code())
        }
    }
}

fn read_secret_file(path: &Path) -> Result<String, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(raw.trim_end_matches(['\n', '\r']).to_owned())
}

/// Authenticate every `--approver`, reading credentials from the paired
/// `--credential-file` or an interactive prompt.
fn sessions(cli: &Cli, ka: &KeyAuthority) -> Result<Vec<OperatorSession>, CliError> {
    let mut sessions = Vec::new();
    for (i, name) in cli.approvers.iter().enumerate() {
        let mut secret = match cli.credential_files.get(i) {
            Some(path) => read_secret_file(path)?,
            None => prompt::read_secret(&format!("credential for {name}: ")).map_err(|e| {
                CliError::Usage(format!(
                    "no --credential-file for approver {name} and no terminal: {e}"
                ))
            })?,
        };
        let session = ka.authenticate_operator(&OperatorId::new(name.as_str()), &secret);
        secret.zeroize();
        sessions.push(session?);
    }
    Ok(sessions)
}

fn open_authority(cli: &Cli) -> Result<KeyAuthority, CliError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let mut ka = KeyAuthority::open(&cli.repo, clock)?;
    if let Some(path) = &cli.master_passphrase_file {
        let mut passphrase = read_secret_file(path)?;
        let unsealed = ka.unseal_master(&passphrase);
        passphrase.zeroize();
        unsealed?;
    }
    Ok(ka)
}

fn now() -> Timestamp {
    SystemClock.now()
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let _lock = lock::acquire(&cli.repo, cli.wait_lock).map_err(|e| match e {
        lock::LockError::Busy => CliError::Locked,
        lock::LockError::Io(e) => CliError::Io(e),
    })?;

    match &cli.command {
        Command::Init(args) => cmd_init(&cli, args),
        Command::Operator {
            command: OperatorCommand::Add { id, secret_file },
        } => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let mut secret = read_secret_file(secret_file)?;
            let added = ka.add_operator(OperatorId::new(id.as_str()), &secret, &approvals);
            secret.zeroize();
            added?;
            Ok(Outcome::new(DocBuilder::new().text("operator_id", id.as_str()).build())
                .line(format!("operator added: {id}")))
        }
        Command::Issuer { command } => match command {
            IssuerCommand::Create { dn } => {
                let mut ka = open_authority(&cli)?;
                let approvals = sessions(&cli, &ka)?;
                let issuer = ka.create_issuer(dn, &approvals)?;
                Ok(Outcome::new(
                    DocBuilder::new()
                        .text("dn", issuer.distinguished_name.clone())
                        .text("issuer_id", issuer.participant_id.as_str())
                        .build(),
                )
                .line(format!("issuer created: {}", issuer.participant_id))
                .line(format!("dn: {}", issuer.distinguished_name)))
            }
            IssuerCommand::Rollover { issuer, effective } => {
                let mut ka = open_authority(&cli)?;
                let approvals = sessions(&cli, &ka)?;
                let effective = Timestamp(effective.unwrap_or_else(|| now().as_secs()));
                let issuer_id = ParticipantId::new(issuer.as_str());
                let (key_id, _) = ka.rollover_issuing_key(&issuer_id, effective, &approvals)?;
                Ok(Outcome::new(
                    DocBuilder::new()
                        .int("effective", effective.as_secs())
                        .text("issuer_id", issuer.as_str())
                        .text("key_id", key_id.as_str())
                        .build(),
                )
                .line(format!("issuing key rolled over: {key_id}"))
                .line(format!("valid from: {effective}")))
            }
        },
        Command::Participant {
            command: ParticipantCommand::Add { name },
        } => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let participant = ka.add_participant(name, &approvals)?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("display_name", name.as_str())
                    .text("participant_id", participant.participant_id.as_str())
                    .build(),
            )
            .line(format!("participant added: {}", participant.participant_id)))
        }
        Command::Keygen(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let issuer = ParticipantId::new(args.issuer.as_str());
            let owner = ParticipantId::new(args.owner.as_str());
            let (key_id, instance_id) =
                ka.generate_participant_keys(&issuer, &owner, &args.algorithm, &approvals)?;
            let public = ka.registry().key(&key_id).map(|k| k.public_part.clone()).unwrap_or_default();
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("algorithm", args.algorithm.as_str())
                    .text("instance_id", instance_id.as_str())
                    .text("key_id", key_id.as_str())
                    .text("owner", owner.as_str())
                    .bytes("public_key", public)
                    .build(),
            )
            .line(format!("key generated: {key_id}"))
            .line(format!("instance: {instance_id} (storable)")))
        }
        Command::Issue(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let cert = ka.issue_certificate(
                &ParticipantId::new(args.issuer.as_str()),
                &ParticipantId::new(args.subject.as_str()),
                &KeyId::new(args.key.as_str()),
                Timestamp(args.valid_from),
                Timestamp(args.valid_to),
                args.usage.iter().cloned().collect::<BTreeSet<_>>(),
                &approvals,
            )?;
            let id = cert.id();
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("cert_id", id.clone())
                    .value(
                        "certificate",
                        ka_core::store::docs::certificate_doc(&cert, true),
                    )
                    .build(),
            )
            .line(format!("certificate issued: {id}"))
            .line(format!("serial: {}", cert.serial)))
        }
        Command::CrossIssue(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let cert = ka.issue_cross_certificate(
                &ParticipantId::new(args.signer.as_str()),
                &ParticipantId::new(args.subject_issuer.as_str()),
                Timestamp(args.valid_from),
                Timestamp(args.valid_to),
                &approvals,
            )?;
            let id = cert.id();
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("cert_id", id.clone())
                    .value(
                        "certificate",
                        ka_core::store::docs::certificate_doc(&cert, true),
                    )
                    .build(),
            )
            .line(format!("cross-certificate issued: {id}")))
        }
        Command::Revoke(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let entry = ka.revoke(
                &ParticipantId::new(args.issuer.as_str()),
                args.serial,
                &args.reason,
                &approvals,
            )?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("issuer_id", args.issuer.as_str())
                    .text("reason", entry.reason.clone())
                    .int("revoked_at", entry.revoked_at.as_secs())
                    .int("serial", entry.serial as i64)
                    .build(),
            )
            .line(format!("revoked serial {} of {}", args.serial, args.issuer)))
        }
        Command::Crl {
            command: CrlCommand::Publish { issuer, next_update },
        } => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let crl = ka.publish_crl(
                &ParticipantId::new(issuer.as_str()),
                Timestamp(*next_update),
                &approvals,
            )?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .value("crl", ka_core::store::docs::crl_doc(&crl, true))
                    .text("issuer_id", issuer.as_str())
                    .build(),
            )
            .line(format!(
                "crl published for {issuer}: {} entries",
                crl.entries.len()
            )))
        }
        Command::Personalize(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let instance = InstanceId::new(args.instance.as_str());
            let (pse, passphrase) =
                ka.personalize(&instance, &ParticipantId::new(args.subject.as_str()), &approvals)?;
            if let Some(out) = &args.out {
                std::fs::copy(
                    ka.repository().path_of(Kind::Pse, pse.container_id.as_str()),
                    out,
                )?;
            }
            // The passphrase is revealed exactly once, here.
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("container_id", pse.container_id.as_str())
                    .text("instance_id", instance.as_str())
                    .text("passphrase", passphrase.secret())
                    .text("subject", args.subject.as_str())
                    .build(),
            )
            .line(format!("pse sealed: {}", pse.container_id))
            .line(format!("passphrase: {}", passphrase.secret()))
            .line("(shown once; never persisted)".to_owned()))
        }
        Command::Deliver(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let instance = InstanceId::new(args.instance.as_str());
            ka.record_delivery(
                &instance,
                &ParticipantId::new(args.recipient.as_str()),
                &args.channel,
                &approvals,
            )?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("channel", args.channel.as_str())
                    .text("instance_id", instance.as_str())
                    .text("recipient", args.recipient.as_str())
                    .text("state", "usable")
                    .build(),
            )
            .line(format!("delivered {instance} to {}", args.recipient)))
        }
        Command::Deposit(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let purpose = match args.purpose {
                PurposeArg::Backup => DepositPurpose::Backup,
                PurposeArg::Archive => DepositPurpose::Archive,
                PurposeArg::Escrow => DepositPurpose::Escrow,
            };
            let instance = InstanceId::new(args.instance.as_str());
            let record = ka.deposit_key(&instance, purpose, &approvals)?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("deposit_id", record.deposit_id.as_str())
                    .text("instance_id", instance.as_str())
                    .text("key_id", record.key_id.as_str())
                    .text("purpose", ka_core::store::docs::deposit_purpose_name(purpose))
                    .build(),
            )
            .line(format!("deposited: {}", record.deposit_id)))
        }
        Command::Recover(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let (key_id, instance_id) =
                ka.recover_key(&DepositId::new(args.deposit.as_str()), &approvals)?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("deposit_id", args.deposit.as_str())
                    .text("instance_id", instance_id.as_str())
                    .text("key_id", key_id.as_str())
                    .build(),
            )
            .line(format!("recovered {key_id} into new instance {instance_id}")))
        }
        Command::Copy(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let source = InstanceId::new(args.instance.as_str());
            let new_id = ka.copy_key(&source, &approvals)?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("instance_id", new_id.as_str())
                    .text("source", source.as_str())
                    .build(),
            )
            .line(format!("copied {source} into {new_id}")))
        }
        Command::Destroy(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let instance = InstanceId::new(args.instance.as_str());
            ka.destroy_key(&instance, &approvals)?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("instance_id", instance.as_str())
                    .int("retired", 1)
                    .text("state", "non-existing")
                    .build(),
            )
            .line(format!("destroyed: {instance}")))
        }
        Command::TransferOwner(args) => {
            let mut ka = open_authority(&cli)?;
            let approvals = sessions(&cli, &ka)?;
            let record = ka.transfer_ownership(
                &KeyId::new(args.key.as_str()),
                &ParticipantId::new(args.new_owner.as_str()),
                &approvals,
            )?;
            Ok(Outcome::new(
                DocBuilder::new()
                    .text("key_id", args.key.as_str())
                    .text("owner", record.owner.as_str())
                    .int("since", record.since.as_secs())
                    .build(),
            )
            .line(format!("owner of {} is now {}", args.key, record.owner)))
        }
        Command::VerifyChain(args) => {
            let ka = open_authority(&cli)?;
            let at = Timestamp(args.at.unwrap_or_else(|| now().as_secs()));
            let mut anchors: Vec<TrustAnchor> = Vec::new();
            for issuer in &args.anchors {
                anchors.push(ka.anchor_for(&ParticipantId::new(issuer.as_str()), at)?);
            }
            let verdict = ka.verify_chain(&args.leaf, &anchors, at)?;
            let (doc, line) = match &verdict {
                ChainVerdict::Valid { path } => (
                    DocBuilder::new()
                        .list("path", path.iter().map(Value::text).collect())
                        .int("valid", 1)
                        .build(),
                    format!("valid (path: {})", path.join(" -> ")),
                ),
                ChainVerdict::Invalid { reason } => (
                    DocBuilder::new()
                        .text("reason", reason.name())
                        .int("valid", 0)
                        .build(),
                    format!("invalid: {}", reason.name()),
                ),
            };
            Ok(Outcome::new(doc).line(line))
        }
        Command::Audit {
            command: AuditCommand::Verify,
        } => {
            let ka = open_authority(&cli)?;
            let verdict = ka.verify_audit()?;
            let (doc, line) = match verdict {
                ka_core::control::AuditVerdict::Valid { records } => (
                    DocBuilder::new()
                        .int("records", records as i64)
                        .int("valid", 1)
                        .build(),
                    format!("audit chain valid ({records} records)"),
                ),
                ka_core::control::AuditVerdict::Broken { at, reason } => (
                    DocBuilder::new()
                        .int("broken_at", at as i64)
                        .text("reason", reason.name())
                        .int("valid", 0)
                        .build(),
                    format!("audit chain BROKEN at seq {at}: {}", reason.name()),
                ),
            };
            Ok(Outcome::new(doc).line(line))
        }
        Command::Show(args) => {
            let ka = open_authority(&cli)?;
            let doc = match args.kind {
                ShowKind::Config => ka
                    .repository()
                    .load_config()
                    .map_err(AuthorityError::from)?,
                kind => {
                    let id = args.id.as_deref().ok_or_else(|| {
                        CliError::Usage("an object id is required for this kind".to_owned())
                    })?;
                    let kind = match kind {
                        ShowKind::Issuer => Kind::Issuer,
                        ShowKind::Participant => Kind::Participant,
                        ShowKind::Key => Kind::Key,
                        ShowKind::Instance => Kind::Instance,
                        ShowKind::Deposit => Kind::Deposit,
                        ShowKind::Cert => Kind::Cert,
                        ShowKind::Crl => Kind::Crl,
                        ShowKind::Pse => Kind::Pse,
                        ShowKind::Operator => Kind::Operator,
                        ShowKind::Config => unreachable!(),
                    };
                    ka.repository().load(kind, id).map_err(AuthorityError::from)?
                }
            };
            let rendered = String::from_utf8_lossy(&canonical::encode(&doc)).into_owned();
            Ok(Outcome::new(doc).line(rendered))
        }
    }
}

fn cmd_init(cli: &Cli, args: &InitArgs) -> Result<Outcome, CliError> {
    let options = AuthorityOptions {
        authority_id: args.authority_id.clone(),
        kdf: match args.kdf_profile {
            KdfProfile::Default => KdfParams::default(),
            KdfProfile::Light => KdfParams::light(),
        },
        offline_mode: args.offline_mode,
        ..AuthorityOptions::default()
    };
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let (_ka, receipt) = KeyAuthority::init(&cli.repo, options, clock)?;
    Ok(Outcome::new(
        DocBuilder::new()
            .text("authority_id", args.authority_id.as_str())
            .text("master_container_id", receipt.master.container_id.as_str())
            .text("master_instance_id", receipt.master.instance_id.as_str())
            .text("master_key_id", receipt.master.key_id.as_str())
            .text("master_passphrase", receipt.master_passphrase.secret())
            .build(),
    )
    .line(format!("repository initialized at {}", cli.repo.display()))
    .line(format!("master key: {}", receipt.master.key_id))
    .line(format!(
        "master passphrase: {}",
        receipt.master_passphrase.secret()
    ))
    .line("(shown once; store it offline — wrapped material is unrecoverable without it)".to_owned()))
}
