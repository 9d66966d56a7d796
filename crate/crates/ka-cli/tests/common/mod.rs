//! Shared driver for exercising the `ka` binary.

use std::path::{Path, PathBuf};
use std::process::Output;

use ka_core::store::canonical::{self, Value};

pub const KA_BIN: &str = env!("CARGO_BIN_EXE_ka");

pub struct Ka {
    pub repo: PathBuf,
    pub master_pass_file: PathBuf,
}

#[allow(dead_code)] // each integration test uses its own subset
impl Ka {
    pub fn new(dir: &Path) -> Ka {
        Ka {
            repo: dir.join("repo"),
            master_pass_file: dir.join("master.pass"),
        }
    }

    pub fn raw(&self, args: &[&str]) -> Output {
        std::process::Command::new(KA_BIN)
            .arg("--repo")
            .arg(&self.repo)
            .args(args)
            .output()
            .expect("spawn ka")
    }

    /// Run with `--json`, expect success, decode the canonical document.
    pub fn json(&self, args: &[&str]) -> Value {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let output = self.raw(&full);
        assert!(
            output.status.success(),
            "ka {args:?} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        canonical::decode(&output.stdout).expect("machine output is one canonical document")
    }

    /// Expect a non-zero exit; return (code, stderr).
    pub fn expect_fail(&self, args: &[&str]) -> (i32, String) {
        let output = self.raw(args);
        assert!(
            !output.status.success(),
            "ka {args:?} unexpectedly succeeded"
        );
        (
            output.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&output.stderr).into_owned(),
        )
    }

    /// Approver flags for one operator.
    pub fn approve<'a>(&self, name: &'a str, cred: &'a str) -> Vec<&'a str> {
        vec!["--approver", name, "--credential-file", cred]
    }
}

pub fn text(doc: &Value, key: &str) -> String {
    doc.field(key)
        .unwrap_or_else(|e| panic!("field {key}: {e}"))
        .as_text()
        .unwrap_or_else(|| panic!("field {key} is not text"))
        .to_owned()
}

pub fn int(doc: &Value, key: &str) -> i64 {
    doc.field(key)
        .unwrap_or_else(|e| panic!("field {key}: {e}"))
        .as_int()
        .unwrap_or_else(|| panic!("field {key} is not an int"))
}
