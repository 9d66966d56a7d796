//! Exclusive repository lock.
//!
//! One CLI invocation holds an exclusive `flock` on a sibling lock file
//! for the whole run; the kernel releases it if the process dies, so no
//! stale state survives a crash. The default is fail-fast; `--wait-lock`
//! queues instead.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

pub struct RepoLock {
    _file: File,
}

#[derive(Debug)]
pub enum LockError {
    Busy,
    Io(io::Error),
}

fn lock_path(repo: &Path) -> PathBuf {
    let name = repo
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("ka-repo");
    repo.with_file_name(format!("{name}.lock"))
}

pub fn acquire(repo: &Path, wait: bool) -> Result<RepoLock, LockError> {
    let path = lock_path(repo);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(LockError::Io)?;
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(LockError::Io)?;
    let op = if wait {
        libc::LOCK_EX
    } else {
        libc::LOCK_EX | libc::LOCK_NB
    };
    let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
    if rc != 0 {
        let err = io::Error::last_os_error();
        return if err.kind() == io::ErrorKind::WouldBlock {
            Err(LockError::Busy)
        } else {
            Err(LockError::Io(err))
        };
    }
    Ok(RepoLock { _file: file })
}
