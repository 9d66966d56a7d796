//! Canonical serialization and the on-disk repository.
//!
//! This is the single place where byte-exact formats are defined. Every
//! persisted object is the canonical encoding of a document followed by a
//! `#sha256:` footer line for corruption detection; PSE containers are
//! additionally framed by the magic bytes `KAPSE1`. Writes go through a
//! temp file and an atomic rename, so an interrupted save leaves either
//! the old or the new version readable, never garbage. No plaintext
//! private key byte ever appears under the repository root.
//!
//! Layout:
//!
//! ```text
//! <root>/config                 authority configuration (single document)
//! <root>/issuers/<id>           issuer records
//! <root>/participants/<id>      participant records
//! <root>/keys/<id>              logical key records (public material only)
//! <root>/instances/<id>         instance event histories (+ wrapped custody)
//! <root>/deposits/<id>          wrapped deposits
//! <root>/certs/<id>             certificates
//! <root>/crls/<id>              latest CRL per issuer
//! <root>/pse/<id>               sealed PSE containers ("KAPSE1" framed)
//! <root>/operators/<id>         operator credential verifiers
//! <root>/audit/log              append-only audit chain, one record per line
//! ```

pub mod canonical;
pub mod docs;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use canonical::Value;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {kind}/{id}")]
    NotFound { kind: &'static str, id: String },
    #[error("storage corrupt at {path}: {detail}")]
    StorageCorrupt { path: String, detail: String },
    #[error("malformed document: {0}")]
    Malformed(#[from] canonical::CanonicalError),
    #[error("invalid object id {0:?}")]
    InvalidId(String),
    #[error("repository already exists at {0}")]
    AlreadyExists(String),
    #[error("no repository at {0}")]
    NoRepository(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Kinds of persisted objects, one subdirectory each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Issuer,
    Participant,
    Key,
    Instance,
    Deposit,
    Cert,
    Crl,
    Pse,
    Operator,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Issuer,
        Kind::Participant,
        Kind::Key,
        Kind::Instance,
        Kind::Deposit,
        Kind::Cert,
        Kind::Crl,
        Kind::Pse,
        Kind::Operator,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            Kind::Issuer => "issuers",
            Kind::Participant => "participants",
            Kind::Key => "keys",
            Kind::Instance => "instances",
            Kind::Deposit => "deposits",
            Kind::Cert => "certs",
            Kind::Crl => "crls",
            Kind::Pse => "pse",
            Kind::Operator => "operators",
        }
    }

    pub fn from_dir(dir: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.dir() == dir)
    }
}

pub const PSE_MAGIC: &[u8] = b"KAPSE1";
const FOOTER_PREFIX: &[u8] = b"\n#sha256:";
const AUDIT_FILE: &str = "audit/log";
const CONFIG_FILE: &str = "config";

/// One repository handle per process; writes are serialized behind
/// `&self` plus the CLI-level repository lock.
#[derive(Debug)]
pub struct Repository {
    root: PathBuf,
    /// fsync data files after writing. Leave on for real repositories;
    /// scripted runs may turn it off for speed.
    durable: bool,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !id.starts_with('.')
}

impl Repository {
    /// Create a fresh repository at `root`; fails if one already exists.
    pub fn create(root: impl Into<PathBuf>) -> Result<Repository, StoreError> {
        let root = root.into();
        if root.join(CONFIG_FILE).exists() {
            return Err(StoreError::AlreadyExists(root.display().to_string()));
        }
        fs::create_dir_all(&root)?;
        for kind in Kind::ALL {
            fs::create_dir_all(root.join(kind.dir()))?;
        }
        fs::create_dir_all(root.join("audit"))?;
        Ok(Repository {
            root,
            durable: true,
        })
    }

    /// Open an existing repository.
    pub fn open(root: impl Into<PathBuf>) -> Result<Repository, StoreError> {
        let root = root.into();
        if !root.join(CONFIG_FILE).exists() {
            return Err(StoreError::NoRepository(root.display().to_string()));
        }
        Ok(Repository {
            root,
            durable: true,
        })
    }

    pub fn set_durable(&mut self, durable: bool) {
        self.durable = durable;
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, kind: Kind, id: &str) -> PathBuf {
        self.root.join(kind.dir()).join(id)
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join(AUDIT_FILE)
    }

    fn frame(magic: bool, doc: &Value) -> Vec<u8> {
        let mut body = Vec::new();
        if magic {
            body.extend_from_slice(PSE_MAGIC);
        }
        body.extend_from_slice(&canonical::encode(doc));
        let digest = Sha256::digest(&body);
        body.extend_from_slice(FOOTER_PREFIX);
        body.extend_from_slice(hex::encode(digest).as_bytes());
        body.push(b'\n');
        body
    }

    fn unframe(magic: bool, raw: &[u8], path: &Path) -> Result<Value, StoreError> {
        let corrupt = |detail: &str| StoreError::StorageCorrupt {
            path: path.display().to_string(),
            detail: detail.to_owned(),
        };
        let footer_at = raw
            .windows(FOOTER_PREFIX.len())
            .rposition(|w| w == FOOTER_PREFIX)
            .ok_or_else(|| corrupt("missing content-hash footer"))?;
        let body = &raw[..footer_at];
        let footer = &raw[footer_at + FOOTER_PREFIX.len()..];
        let footer = footer.strip_suffix(b"\n").unwrap_or(footer);
        let expected = hex::encode(Sha256::digest(body));
        if footer != expected.as_bytes() {
            return Err(corrupt("content hash mismatch"));
        }
        let payload = if magic {
            body.strip_prefix(PSE_MAGIC)
                .ok_or_else(|| corrupt("missing KAPSE1 magic"))?
        } else {
            body
        };
        Ok(canonical::decode(payload)?)
    }

    /// Atomic write: temp file in the same directory, then rename.
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("object paths have parents");
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            path.file_name().and_then(|n| n.to_str()).unwrap_or("obj")
        ));
        {
            let mut file = File::create(&tmp)?;
            file.write_all(bytes)?;
            file.flush()?;
            if self.durable {
                file.sync_all()?;
            }
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn save(&self, kind: Kind, id: &str, doc: &Value) -> Result<(), StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        self.write_atomic(&self.path_of(kind, id), &Self::frame(kind == Kind::Pse, doc))
    }

    pub fn load(&self, kind: Kind, id: &str) -> Result<Value, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        let path = self.path_of(kind, id);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    kind: kind.dir(),
                    id: id.to_owned(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        Self::unframe(kind == Kind::Pse, &raw, &path)
    }

    pub fn exists(&self, kind: Kind, id: &str) -> bool {
        valid_id(id) && self.path_of(kind, id).exists()
    }

    pub fn list(&self, kind: Kind) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join(kind.dir()))? {
            let entry = entry?;
            if let Some(name) = entry.file_name().to_str() {
                if valid_id(name) {
                    ids.push(name.to_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn delete(&self, kind: Kind, id: &str) -> Result<(), StoreError> {
        let path = self.path_of(kind, id);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound {
                kind: kind.dir(),
                id: id.to_owned(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Overwrite the stored bytes with zeros before deleting, so the live
    /// file never survives with its payload.
    pub fn shred(&self, kind: Kind, id: &str) -> Result<(), StoreError> {
        let path = self.path_of(kind, id);
        let len = match fs::metadata(&path) {
            Ok(meta) => meta.len() as usize,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    kind: kind.dir(),
                    id: id.to_owned(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let mut file = OpenOptions::new().write(true).open(&path)?;
        file.write_all(&vec![0u8; len])?;
        if self.durable {
            file.sync_all()?;
        }
        drop(file);
        fs::remove_file(&path)?;
        Ok(())
    }

    pub fn save_config(&self, doc: &Value) -> Result<(), StoreError> {
        self.write_atomic(&self.root.join(CONFIG_FILE), &Self::frame(false, doc))
    }

    pub fn load_config(&self) -> Result<Value, StoreError> {
        let path = self.root.join(CONFIG_FILE);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    kind: "config",
                    id: CONFIG_FILE.to_owned(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        Self::unframe(false, &raw, &path)
    }

    /// Append one audit record and flush it to disk before returning, so
    /// the record is durable before the operation's effects commit.
    pub fn append_audit(&self, record: &Value) -> Result<(), StoreError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.audit_path())?;
        let mut line = canonical::encode(record);
        line.push(b'\n');
        file.write_all(&line)?;
        file.flush()?;
        if self.durable {
            file.sync_all()?;
        }
        Ok(())
    }

    /// Read the whole audit log; one canonical record per line.
    pub fn read_audit(&self) -> Result<Vec<Value>, StoreError> {
        let path = self.audit_path();
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        raw.split(|&b| b == b'\n')
            .filter(|line| !line.is_empty())
            .map(|line| Ok(canonical::decode(line)?))
            .collect()
    }

    /// Search every live file under the repository for a byte needle.
    /// Used to prove that plaintext secrets never reach disk.
    pub fn scan_for(&self, needle: &[u8]) -> Result<Vec<PathBuf>, StoreError> {
        let mut hits = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let mut contents = Vec::new();
                File::open(&path)?.read_to_end(&mut contents)?;
                if !needle.is_empty()
                    && contents.windows(needle.len()).any(|w| w == needle)
                {
                    hits.push(path);
                }
            }
        }
        Ok(hits)
    }
}
