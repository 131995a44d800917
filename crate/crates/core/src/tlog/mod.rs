//! Append-only transparency log: Merkle tree for proofs, hash chain for
//! forward integrity, and a length-prefixed file format on disk.
//!
//! On-disk layout inside the log directory:
//! - `log.bin`: records of `u32 BE length || entry bytes`.
//! - `checkpoints.txt`: one line per append, `tree_size root_hex chain_hex`.

mod entry;
mod merkle;

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use entry::{EntryError, LogEntry, LogPayload};
pub use merkle::{
    empty_root, leaf_hash, node_hash, verify_consistency, verify_inclusion, MerkleProof,
    MerkleRoot, MerkleTree, OutOfRange, ProofStep, Side,
};

use crate::hash::{sha256, sha256_parts, Hash256};

pub const LOG_FILE: &str = "log.bin";
pub const CHECKPOINT_FILE: &str = "checkpoints.txt";

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    OutOfRange(#[from] OutOfRange),
    #[error("invalid entry: {0}")]
    Entry(#[from] EntryError),
    #[error("log tampered at index {at}: {reason}")]
    Tampered { at: u64, reason: String },
}

/// Chain value before any entry.
pub fn chain_genesis() -> Hash256 {
    sha256(b"")
}

/// `c_{t+1} = H(c_t || leaf_{t+1})`.
pub fn chain_next(prev: &Hash256, leaf: &Hash256) -> Hash256 {
    sha256_parts(&[prev.as_bytes(), leaf.as_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tree_size: u64,
    pub root: Hash256,
    pub chain: Hash256,
}

impl Checkpoint {
    pub fn to_line(&self) -> String {
        format!("{} {} {}", self.tree_size, self.root, self.chain)
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut parts = line.split(' ');
        let tree_size = parts.next()?.parse().ok()?;
        let root = parts.next()?.parse().ok()?;
        let chain = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        // Reject non-canonical spellings such as "+5" or "05".
        let cp = Self {
            tree_size,
            root,
            chain,
        };
        (cp.to_line() == line).then_some(cp)
    }
}

/// Result of an append.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub index: u64,
    pub root: MerkleRoot,
    pub chain: Hash256,
}

/// Where appended records go. Implementations must be all-or-nothing: on
/// error, nothing from the failed call may remain visible.
pub trait LogBackend: Send {
    fn append(&mut self, record: &[u8], checkpoint_line: &str) -> io::Result<()>;
}

/// Keeps nothing; the in-memory log state is the only copy.
#[derive(Debug, Default)]
pub struct MemoryBackend;

impl LogBackend for MemoryBackend {
    fn append(&mut self, _record: &[u8], _checkpoint_line: &str) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    /// Hand data to the OS on every append.
    #[default]
    Flush,
    /// Also fsync both files on every append.
    Fsync,
}

#[derive(Debug)]
pub struct FileBackend {
    log: File,
    checkpoints: File,
    log_len: u64,
    checkpoints_len: u64,
    sync: SyncMode,
}

impl FileBackend {
    fn open(dir: &Path, sync: SyncMode) -> io::Result<Self> {
        let open = |name: &str| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(name))
        };
        let log = open(LOG_FILE)?;
        let checkpoints = open(CHECKPOINT_FILE)?;
        Ok(Self {
            log_len: log.metadata()?.len(),
            checkpoints_len: checkpoints.metadata()?.len(),
            log,
            checkpoints,
            sync,
        })
    }

    fn write_both(&mut self, record: &[u8], line: &str) -> io::Result<()> {
        self.log.write_all(record)?;
        self.log.flush()?;
        if self.sync == SyncMode::Fsync {
            self.log.sync_data()?;
        }
        self.checkpoints.write_all(line.as_bytes())?;
        self.checkpoints.write_all(b"\n")?;
        self.checkpoints.flush()?;
        if self.sync == SyncMode::Fsync {
            self.checkpoints.sync_data()?;
        }
        Ok(())
    }
}

impl LogBackend for FileBackend {
    fn append(&mut self, record: &[u8], checkpoint_line: &str) -> io::Result<()> {
        match self.write_both(record, checkpoint_line) {
            Ok(()) => {
                self.log_len += record.len() as u64;
                self.checkpoints_len += checkpoint_line.len() as u64 + 1;
                Ok(())
            }
            Err(e) => {
                let _ = self.log.set_len(self.log_len);
                let _ = self.checkpoints.set_len(self.checkpoints_len);
                Err(e)
            }
        }
    }
}

/// Frames an encoded entry as a log record.
pub fn frame(entry_bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + entry_bytes.len());
    out.extend_from_slice(&(entry_bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(entry_bytes);
    out
}

/// Single-writer log. Wrap in a lock to share across threads; every read
/// method takes `&self`.
pub struct TransparencyLog {
    tree: MerkleTree,
    entries: Vec<LogEntry>,
    checkpoints: Vec<Checkpoint>,
    // cumulative record bytes after each entry
    storage: Vec<u64>,
    chain: Hash256,
    backend: Box<dyn LogBackend>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for TransparencyLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransparencyLog")
            .field("size", &self.len())
            .field("dir", &self.dir)
            .finish()
    }
}

impl Default for TransparencyLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl TransparencyLog {
    pub fn in_memory() -> Self {
        Self::with_backend(Box::new(MemoryBackend))
    }

    /// Starts an empty log over a custom backend.
    pub fn with_backend(backend: Box<dyn LogBackend>) -> Self {
        Self {
            tree: MerkleTree::new(),
            entries: Vec::new(),
            checkpoints: Vec::new(),
            storage: Vec::new(),
            chain: chain_genesis(),
            backend,
            dir: None,
        }
    }

    /// Opens (or creates) a log directory, replaying and checking every
    /// stored record. Fails on any integrity violation.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, LogError> {
        Self::open_with(dir, SyncMode::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, sync: SyncMode) -> Result<Self, LogError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let log_bytes = read_or_empty(&dir.join(LOG_FILE))?;
        let cp_bytes = read_or_empty(&dir.join(CHECKPOINT_FILE))?;
        let replay = replay(&log_bytes, &cp_bytes);
        if let Some((at, reason)) = replay.tampered {
            return Err(LogError::Tampered { at, reason });
        }
        let backend = FileBackend::open(dir, sync)?;
        Ok(Self {
            tree: replay.tree,
            entries: replay.entries,
            checkpoints: replay.checkpoints,
            storage: replay.storage,
            chain: replay.chain,
            backend: Box::new(backend),
            dir: Some(dir.to_path_buf()),
        })
    }

    /// Replays a log directory into memory without creating or touching any
    /// file. Appends to the result are not persisted.
    pub fn load_read_only(dir: impl AsRef<Path>) -> Result<Self, LogError> {
        let dir = dir.as_ref();
        let log_bytes = fs::read(dir.join(LOG_FILE))?;
        let cp_bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
        let replay = replay(&log_bytes, &cp_bytes);
        if let Some((at, reason)) = replay.tampered {
            return Err(LogError::Tampered { at, reason });
        }
        Ok(Self {
            tree: replay.tree,
            entries: replay.entries,
            checkpoints: replay.checkpoints,
            storage: replay.storage,
            chain: replay.chain,
            backend: Box::new(MemoryBackend),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry> {
        self.entries.get(index as usize)
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn chain_head(&self) -> Hash256 {
        self.chain
    }

    /// Hash operations performed by tree maintenance so far.
    pub fn hash_ops(&self) -> u64 {
        self.tree.hash_ops()
    }

    pub fn leaf_hash(&self, index: u64) -> Option<Hash256> {
        self.tree.leaf(index)
    }

    pub fn root(&self) -> MerkleRoot {
        self.checkpoints
            .last()
            .map(|c| MerkleRoot {
                hash: c.root,
                tree_size: c.tree_size,
            })
            .unwrap_or(MerkleRoot {
                hash: empty_root(),
                tree_size: 0,
            })
    }

    pub fn root_at(&self, tree_size: u64) -> Result<MerkleRoot, LogError> {
        Ok(self.tree.root_at(tree_size)?)
    }

    /// Appends an entry. The record and checkpoint are persisted before the
    /// receipt is returned; on storage failure the log is left unchanged.
    pub fn append(&mut self, payload: LogPayload) -> Result<Receipt, LogError> {
        let index = self.len();
        let entry = LogEntry::from_payload(index, payload);
        let bytes = entry.encode()?;
        let prev_chain = self.chain;
        let root = self.tree.append(&bytes);
        let leaf = self.tree.leaf(index).expect("just appended");
        let chain = chain_next(&prev_chain, &leaf);
        let checkpoint = Checkpoint {
            tree_size: root.tree_size,
            root: root.hash,
            chain,
        };
        let record = frame(&bytes);
        if let Err(e) = self.backend.append(&record, &checkpoint.to_line()) {
            self.tree.truncate(index);
            return Err(LogError::Storage(e));
        }
        let prev_bytes = self.storage.last().copied().unwrap_or(0);
        self.storage.push(prev_bytes + record.len() as u64);
        self.chain = chain;
        self.checkpoints.push(checkpoint);
        self.entries.push(entry);
        Ok(Receipt { index, root, chain })
    }

    pub fn prove_inclusion(&self, index: u64, tree_size: u64) -> Result<MerkleProof, LogError> {
        Ok(self.tree.prove_inclusion(index, tree_size)?)
    }

    pub fn prove_consistency(&self, old: u64, new: u64) -> Result<Vec<Hash256>, LogError> {
        Ok(self.tree.prove_consistency(old, new)?)
    }

    /// Cumulative storage bytes at each requested size (sizes beyond the
    /// current log length are skipped).
    pub fn log_growth_series(&self, sizes: &[u64]) -> Vec<(u64, u64)> {
        sizes
            .iter()
            .filter(|&&n| n >= 1 && n <= self.len())
            .map(|&n| (n, self.storage[(n - 1) as usize]))
            .collect()
    }

    pub fn storage_bytes(&self) -> u64 {
        self.storage.last().copied().unwrap_or(0)
    }
}

fn read_or_empty(path: &Path) -> io::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum IntegrityReport {
    Ok { size: u64 },
    Tampered { at: u64, reason: String },
}

impl IntegrityReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, IntegrityReport::Ok { .. })
    }
}

struct Replay {
    tree: MerkleTree,
    entries: Vec<LogEntry>,
    checkpoints: Vec<Checkpoint>,
    storage: Vec<u64>,
    chain: Hash256,
    tampered: Option<(u64, String)>,
}

fn replay(log: &[u8], checkpoints: &[u8]) -> Replay {
    let mut r = Replay {
        tree: MerkleTree::new(),
        entries: Vec::new(),
        checkpoints: Vec::new(),
        storage: Vec::new(),
        chain: chain_genesis(),
        tampered: None,
    };
    let mut lines = checkpoints.split(|&b| b == b'\n');
    let has_trailing_newline = checkpoints.is_empty() || checkpoints.ends_with(b"\n");
    let mut pos = 0usize;
    let mut i = 0u64;
    let fail = |r: &mut Replay, at: u64, reason: String| {
        r.tampered = Some((at, reason));
    };
    while pos < log.len() {
        if log.len() - pos < 4 {
            fail(&mut r, i, "truncated record length".into());
            return r;
        }
        let len = u32::from_be_bytes(log[pos..pos + 4].try_into().unwrap()) as usize;
        let start = pos + 4;
        if log.len() - start < len {
            fail(&mut r, i, "record extends past end of file".into());
            return r;
        }
        let bytes = &log[start..start + len];
        let entry = match LogEntry::decode(bytes) {
            Ok(e) => e,
            Err(e) => {
                fail(&mut r, i, format!("undecodable entry: {e}"));
                return r;
            }
        };
        if entry.index != i {
            fail(&mut r, i, format!("stored index {} at position {i}", entry.index));
            return r;
        }
        let root = r.tree.append(bytes);
        let leaf = r.tree.leaf(i).expect("just appended");
        r.chain = chain_next(&r.chain, &leaf);

        let line = lines.next().unwrap_or(b"");
        let Some(cp) = std::str::from_utf8(line).ok().and_then(Checkpoint::parse_line) else {
            fail(&mut r, i, "missing or unparsable checkpoint".into());
            return r;
        };
        if cp.tree_size != i + 1 {
            fail(&mut r, i, format!("checkpoint records tree size {}", cp.tree_size));
            return r;
        }
        if cp.chain != r.chain {
            fail(&mut r, i, "hash chain mismatch".into());
            return r;
        }
        if cp.root != root.hash {
            fail(&mut r, i, "merkle root mismatch".into());
            return r;
        }
        pos = start + len;
        let prev = r.storage.last().copied().unwrap_or(0);
        r.storage.push(prev + 4 + len as u64);
        r.checkpoints.push(cp);
        r.entries.push(entry);
        i += 1;
    }
    // Anything left in the checkpoint file means records were removed.
    let leftover: Vec<&[u8]> = lines.collect();
    let extra = match leftover.as_slice() {
        [] => false,
        [last] => !last.is_empty(),
        _ => true,
    };
    if extra {
        fail(&mut r, i, "checkpoints reference entries missing from the log".into());
    } else if !has_trailing_newline {
        fail(&mut r, i.saturating_sub(1), "checkpoint file not newline-terminated".into());
    }
    r
}

/// Integrity check over raw file contents.
pub fn check_integrity_bytes(log: &[u8], checkpoints: &[u8]) -> IntegrityReport {
    let r = replay(log, checkpoints);
    match r.tampered {
        Some((at, reason)) => IntegrityReport::Tampered { at, reason },
        None => IntegrityReport::Ok {
            size: r.entries.len() as u64,
        },
    }
}

/// Recomputes every leaf, chain value, and root in a log directory and
/// reports the first index whose stored data no longer matches.
pub fn check_integrity(dir: impl AsRef<Path>) -> Result<IntegrityReport, LogError> {
    let dir = dir.as_ref();
    let log = fs::read(dir.join(LOG_FILE))?;
    let cps = fs::read(dir.join(CHECKPOINT_FILE))?;
    Ok(check_integrity_bytes(&log, &cps))
}

/// Reads the checkpoint lines of a log directory without validating them.
pub fn read_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<Checkpoint>, LogError> {
    let f = File::open(dir.as_ref().join(CHECKPOINT_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let cp = Checkpoint::parse_line(&line).ok_or_else(|| LogError::Tampered {
            at: n as u64,
            reason: "unparsable checkpoint".into(),
        })?;
        out.push(cp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestDigest;

    fn payload(i: u64) -> LogPayload {
        LogPayload {
            manifest_digest: ManifestDigest::from_bytes(*sha256(&i.to_be_bytes()).as_bytes()),
            signature: vec![i as u8; 64],
            key_id: "dev-k1".into(),
            appended_at: 1_700_000_000_000 + i,
        }
    }

    fn filled(dir: &Path, n: u64) -> TransparencyLog {
        let mut log = TransparencyLog::open(dir).unwrap();
        for i in 0..n {
            log.append(payload(i)).unwrap();
        }
        log
    }

    #[test]
    fn append_returns_indices_and_roots() {
        let mut log = TransparencyLog::in_memory();
        let r0 = log.append(payload(0)).unwrap();
        assert_eq!(r0.index, 0);
        let e0 = LogEntry::from_payload(0, payload(0)).encode().unwrap();
        assert_eq!(r0.root.hash, leaf_hash(&e0));
        assert_eq!(r0.chain, chain_next(&chain_genesis(), &leaf_hash(&e0)));
        let r1 = log.append(payload(1)).unwrap();
        let e1 = LogEntry::from_payload(1, payload(1)).encode().unwrap();
        assert_eq!(r1.root.hash, node_hash(&leaf_hash(&e0), &leaf_hash(&e1)));
        assert_eq!(log.root(), r1.root);
    }

    #[test]
    fn reopen_recovers_state() {
        let dir = tempfile::tempdir().unwrap();
        let root = filled(dir.path(), 100).root();
        let mut log = TransparencyLog::open(dir.path()).unwrap();
        assert_eq!(log.len(), 100);
        assert_eq!(log.root(), root);
        log.append(payload(100)).unwrap();
        drop(log);
        let log = TransparencyLog::open(dir.path()).unwrap();
        assert_eq!(log.len(), 101);
        assert!(check_integrity(dir.path()).unwrap().is_ok());
    }

    #[test]
    fn detects_flip_in_specific_entry() {
        let dir = tempfile::tempdir().unwrap();
        let log = filled(dir.path(), 1000);
        let offset = log.storage[416] as usize + 4 + 20;
        let mut bytes = fs::read(dir.path().join(LOG_FILE)).unwrap();
        bytes[offset] ^= 0x01;
        fs::write(dir.path().join(LOG_FILE), &bytes).unwrap();
        match check_integrity(dir.path()).unwrap() {
            IntegrityReport::Tampered { at, .. } => assert_eq!(at, 417),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            TransparencyLog::open(dir.path()),
            Err(LogError::Tampered { at: 417, .. })
        ));
    }

    #[test]
    fn detects_truncation_with_stale_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let log = filled(dir.path(), 50);
        let keep = log.storage[48] as usize;
        let bytes = fs::read(dir.path().join(LOG_FILE)).unwrap();
        fs::write(dir.path().join(LOG_FILE), &bytes[..keep]).unwrap();
        assert!(matches!(
            check_integrity(dir.path()).unwrap(),
            IntegrityReport::Tampered { at: 49, .. }
        ));
    }

    #[test]
    fn detects_checkpoint_edits() {
        let dir = tempfile::tempdir().unwrap();
        filled(dir.path(), 20);
        let path = dir.path().join(CHECKPOINT_FILE);
        let orig = fs::read(&path).unwrap();
        for pos in (0..orig.len()).step_by(7) {
            let mut b = orig.clone();
            b[pos] ^= 0x04;
            assert!(!check_integrity_bytes(&fs::read(dir.path().join(LOG_FILE)).unwrap(), &b).is_ok(), "{pos}");
        }
    }

    struct FailAfter(usize);

    impl LogBackend for FailAfter {
        fn append(&mut self, _: &[u8], _: &str) -> io::Result<()> {
            if self.0 == 0 {
                return Err(io::Error::other("disk full"));
            }
            self.0 -= 1;
            Ok(())
        }
    }

    #[test]
    fn storage_failure_leaves_log_unchanged() {
        let mut log = TransparencyLog::with_backend(Box::new(FailAfter(3)));
        for i in 0..3 {
            log.append(payload(i)).unwrap();
        }
        let root = log.root();
        assert!(matches!(log.append(payload(3)), Err(LogError::Storage(_))));
        assert_eq!(log.len(), 3);
        assert_eq!(log.root(), root);
        assert_eq!(log.root_at(3).unwrap(), root);
        assert!(log.prove_inclusion(3, 4).is_err());
    }

    #[test]
    fn growth_series_linear_for_fixed_size_entries() {
        let mut log = TransparencyLog::in_memory();
        for i in 0..100 {
            log.append(payload(i)).unwrap();
        }
        let per = log.storage_bytes() / 100;
        let series = log.log_growth_series(&[1, 10, 50, 100, 200]);
        assert_eq!(series.len(), 4);
        for (n, bytes) in series {
            assert_eq!(bytes, n * per);
        }
        assert!(log.log_growth_series(&[]).is_empty());
    }

    #[test]
    fn checkpoint_lines_are_canonical() {
        let cp = Checkpoint {
            tree_size: 5,
            root: sha256(b"r"),
            chain: sha256(b"c"),
        };
        assert_eq!(Checkpoint::parse_line(&cp.to_line()), Some(cp));
        assert_eq!(Checkpoint::parse_line(&format!("+{}", cp.to_line())), None);
        assert_eq!(Checkpoint::parse_line(&format!("0{}", cp.to_line())), None);
    }
}
