//! Enclave manifest parsing, validation, and measurement.
//!
//! The manifest declares what an enclave runs: its size, thread count,
//! entry point, trusted and allowed files, key provider and attestation
//! mode. The measurement is a digest over a canonical encoding of the
//! manifest scalars plus the digests of all trusted file contents; it is
//! the enclave identity checked by the verifier. Allowed files may appear
//! at runtime and are never measured.
//!
//! Text format (byte-exact rules in FORMATS.md):
//!
//! ```text
//! # comment
//! enclave_size = 1M          # bytes; K/M/G suffixes are powers of 1024
//! thread_count = 4
//! entrypoint = bin/serve
//! trusted_file = bin/serve   # repeated
//! allowed_file = data/cache  # repeated
//! key_provider = provider://model-key
//! attestation_mode = remote  # none | local | remote
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::crypto::{digest, digest_parts, Digest256};

pub const MIN_ENCLAVE_SIZE: u64 = 1 << 20;

const MEASUREMENT_DOMAIN: &[u8] = b"fmtee.measurement.v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error("syntax error at line {line}: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("duplicate key '{key}' at line {line}")]
    DuplicateKey { line: usize, key: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("manifest does not match file tree: {0:?}")]
    ValidationFailed(Vec<ValidationError>),
    #[error("bad path '{0}': must be relative, '/'-separated, no '..'")]
    BadPath(String),
}

/// Validation findings from checking a manifest against a file tree.
/// Returned as data, never thrown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationError {
    MissingTrustedFile(String),
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationError::MissingTrustedFile(p) => write!(f, "missing trusted file: {p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttestationMode {
    None,
    Local,
    Remote,
}

impl AttestationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttestationMode::None => "none",
            AttestationMode::Local => "local",
            AttestationMode::Remote => "remote",
        }
    }

    fn code(&self) -> u8 {
        match self {
            AttestationMode::None => 0,
            AttestationMode::Local => 1,
            AttestationMode::Remote => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AttestationMode::None),
            "local" => Some(AttestationMode::Local),
            "remote" => Some(AttestationMode::Remote),
            _ => None,
        }
    }
}

/// Declarative enclave configuration. File lists keep the order they were
/// written in; the measurement is order-independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub enclave_size: u64,
    pub thread_count: u32,
    pub entrypoint: String,
    pub trusted_files: Vec<String>,
    pub allowed_files: Vec<String>,
    pub key_provider: String,
    pub attestation_mode: AttestationMode,
}

impl Manifest {
    /// Check the type invariants: size a power of two and at least 1 MiB,
    /// positive thread count, disjoint duplicate-free file lists, and the
    /// entrypoint listed as a trusted file.
    pub fn check_invariants(&self) -> Result<(), ManifestError> {
        let bad = |msg: String| Err(ManifestError::InvariantViolation(msg));
        if self.enclave_size < MIN_ENCLAVE_SIZE {
            return bad(format!(
                "enclave_size {} below minimum {}",
                self.enclave_size, MIN_ENCLAVE_SIZE
            ));
        }
        if !self.enclave_size.is_power_of_two() {
            return bad(format!(
                "enclave_size {} is not a power of two",
                self.enclave_size
            ));
        }
        if self.thread_count == 0 {
            return bad("thread_count must be positive".into());
        }
        let mut trusted = BTreeSet::new();
        for p in &self.trusted_files {
            normalize_path(p)?;
            if !trusted.insert(p.as_str()) {
                return bad(format!("duplicate trusted_file '{p}'"));
            }
        }
        let mut allowed = BTreeSet::new();
        for p in &self.allowed_files {
            normalize_path(p)?;
            if !allowed.insert(p.as_str()) {
                return bad(format!("duplicate allowed_file '{p}'"));
            }
            if trusted.contains(p.as_str()) {
                return bad(format!("'{p}' listed as both trusted and allowed"));
            }
        }
        if !trusted.contains(self.entrypoint.as_str()) {
            return bad(format!(
                "entrypoint '{}' is not a trusted file",
                self.entrypoint
            ));
        }
        Ok(())
    }

    /// Canonical text rendering. `parse_manifest(render(m)) == m` for any
    /// manifest satisfying the invariants.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("enclave_size = {}\n", self.enclave_size));
        out.push_str(&format!("thread_count = {}\n", self.thread_count));
        out.push_str(&format!("entrypoint = {}\n", self.entrypoint));
        for p in &self.trusted_files {
            out.push_str(&format!("trusted_file = {p}\n"));
        }
        for p in &self.allowed_files {
            out.push_str(&format!("allowed_file = {p}\n"));
        }
        out.push_str(&format!("key_provider = {}\n", self.key_provider));
        out.push_str(&format!("attestation_mode = {}\n", self.attestation_mode.as_str()));
        out
    }
}

/// Normalize a manifest path: relative, '/'-separated, no '..', no empty
/// or '.' components. Returns the collapsed form.
pub fn normalize_path(path: &str) -> Result<String, ManifestError> {
    if path.is_empty() {
        return Err(ManifestError::BadPath(path.into()));
    }
    let mut parts = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => continue, // collapses duplicate separators and leading './'
            ".." => return Err(ManifestError::BadPath(path.into())),
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        return Err(ManifestError::BadPath(path.into()));
    }
    Ok(parts.join("/"))
}

/// In-memory file tree the enclave is launched from. Paths are normalized
/// on insertion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileTree {
    files: BTreeMap<String, Vec<u8>>,
}

impl FileTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, content: impl Into<Vec<u8>>) -> Result<(), ManifestError> {
        let norm = normalize_path(path)?;
        self.files.insert(norm, content.into());
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        let norm = normalize_path(path).ok()?;
        self.files.get(&norm).map(|v| v.as_slice())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Load every regular file under `root`, keyed by its relative path.
    pub fn from_dir(root: &Path) -> std::io::Result<Self> {
        fn walk(tree: &mut FileTree, root: &Path, dir: &Path) -> std::io::Result<()> {
            for entry in std::fs::read_dir(dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.is_dir() {
                    walk(tree, root, &path)?;
                } else {
                    let rel = path
                        .strip_prefix(root)
                        .expect("walk stays under root")
                        .to_string_lossy()
                        .replace('\\', "/");
                    let content = std::fs::read(&path)?;
                    tree.insert(&rel, content).map_err(|e| {
                        std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
                    })?;
                }
            }
            Ok(())
        }
        let mut tree = FileTree::new();
        walk(&mut tree, root, root)?;
        Ok(tree)
    }
}

/// Parse the line-oriented `key = value` manifest format.
pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let mut enclave_size: Option<u64> = None;
    let mut thread_count: Option<u32> = None;
    let mut entrypoint: Option<String> = None;
    let mut key_provider: Option<String> = None;
    let mut attestation_mode: Option<AttestationMode> = None;
    let mut trusted_files = Vec::new();
    let mut allowed_files = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ManifestError::SyntaxError {
                line: line_no,
                msg: "expected 'key = value'".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() && key != "key_provider" {
            return Err(ManifestError::SyntaxError {
                line: line_no,
                msg: format!("empty value for '{key}'"),
            });
        }

        let dup = |key: &str| ManifestError::DuplicateKey {
            line: line_no,
            key: key.into(),
        };
        match key {
            "enclave_size" => {
                if enclave_size.is_some() {
                    return Err(dup(key));
                }
                enclave_size = Some(parse_size(value).ok_or_else(|| ManifestError::SyntaxError {
                    line: line_no,
                    msg: format!("invalid size '{value}'"),
                })?);
            }
            "thread_count" => {
                if thread_count.is_some() {
                    return Err(dup(key));
                }
                thread_count = Some(value.parse().map_err(|_| ManifestError::SyntaxError {
                    line: line_no,
                    msg: format!("invalid thread count '{value}'"),
                })?);
            }
            "entrypoint" => {
                if entrypoint.is_some() {
                    return Err(dup(key));
                }
                entrypoint = Some(value.to_string());
            }
            "trusted_file" => trusted_files.push(value.to_string()),
            "allowed_file" => allowed_files.push(value.to_string()),
            "key_provider" => {
                if key_provider.is_some() {
                    return Err(dup(key));
                }
                key_provider = Some(value.to_string());
            }
            "attestation_mode" => {
                if attestation_mode.is_some() {
                    return Err(dup(key));
                }
                attestation_mode =
                    Some(
                        AttestationMode::parse(value).ok_or_else(|| ManifestError::SyntaxError {
                            line: line_no,
                            msg: format!("invalid attestation mode '{value}'"),
                        })?,
                    );
            }
            other => {
                return Err(ManifestError::SyntaxError {
                    line: line_no,
                    msg: format!("unknown key '{other}'"),
                });
            }
        }
    }

    let missing = |f: &str| ManifestError::InvariantViolation(format!("missing field '{f}'"));
    let manifest = Manifest {
        enclave_size: enclave_size.ok_or_else(|| missing("enclave_size"))?,
        thread_count: thread_count.ok_or_else(|| missing("thread_count"))?,
        entrypoint: entrypoint.ok_or_else(|| missing("entrypoint"))?,
        trusted_files,
        allowed_files,
        key_provider: key_provider.unwrap_or_default(),
        attestation_mode: attestation_mode.unwrap_or(AttestationMode::None),
    };
    manifest.check_invariants()?;
    Ok(manifest)
}

fn parse_size(s: &str) -> Option<u64> {
    let (num, mult) = match s.as_bytes().last()? {
        b'K' | b'k' => (&s[..s.len() - 1], 1u64 << 10),
        b'M' | b'm' => (&s[..s.len() - 1], 1 << 20),
        b'G' | b'g' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>().ok()?.checked_mul(mult)
}

/// Check that every trusted file exists in the tree. Allowed files may be
/// created at runtime, so their absence is not an error.
pub fn validate_against_tree(manifest: &Manifest, tree: &FileTree) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    for path in &manifest.trusted_files {
        if !tree.contains(path) {
            errors.push(ValidationError::MissingTrustedFile(path.clone()));
        }
    }
    errors
}

/// The reference measurement: a digest over the canonical encoding of the
/// manifest scalars followed by `(path, digest(content))` for every
/// trusted file, sorted by path. Independent of the order files appear in
/// the manifest or in the tree; allowed files never contribute.
pub fn compute_measurement(manifest: &Manifest, tree: &FileTree) -> Result<Digest256, ManifestError> {
    manifest.check_invariants()?;
    let errors = validate_against_tree(manifest, tree);
    if !errors.is_empty() {
        return Err(ManifestError::ValidationFailed(errors));
    }

    let mut enc = Vec::new();
    enc.extend_from_slice(MEASUREMENT_DOMAIN);
    enc.extend_from_slice(&manifest.enclave_size.to_be_bytes());
    enc.extend_from_slice(&manifest.thread_count.to_be_bytes());
    put_str(&mut enc, &manifest.entrypoint);
    put_str(&mut enc, &manifest.key_provider);
    enc.push(manifest.attestation_mode.code());

    let mut sorted: Vec<String> = manifest
        .trusted_files
        .iter()
        .map(|p| normalize_path(p).expect("invariants checked"))
        .collect();
    sorted.sort();
    enc.extend_from_slice(&(sorted.len() as u32).to_be_bytes());
    for path in &sorted {
        let content = tree.get(path).expect("validated against tree");
        put_str(&mut enc, path);
        enc.extend_from_slice(digest(content).as_bytes());
    }

    Ok(digest_parts(&[&enc]))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_be_bytes());
    buf.extend_from_slice(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, RngCore, SeedableRng};

    fn minimal_text() -> &'static str {
        "enclave_size = 1M\nthread_count = 4\nentrypoint = bin/serve\ntrusted_file = bin/serve\n"
    }

    fn sample_manifest() -> Manifest {
        Manifest {
            enclave_size: 1 << 21,
            thread_count: 8,
            entrypoint: "bin/serve".into(),
            trusted_files: vec!["bin/serve".into(), "lib/model.cfg".into()],
            allowed_files: vec!["data/cache".into()],
            key_provider: "provider://model-key".into(),
            attestation_mode: AttestationMode::Remote,
        }
    }

    fn tree_for(manifest: &Manifest) -> FileTree {
        let mut tree = FileTree::new();
        for (i, p) in manifest.trusted_files.iter().enumerate() {
            tree.insert(p, format!("content of file {i}").into_bytes())
                .unwrap();
        }
        tree
    }

    #[test]
    fn parses_minimal_manifest() {
        let m = parse_manifest(minimal_text()).unwrap();
        assert_eq!(m.enclave_size, 1 << 20);
        assert_eq!(m.thread_count, 4);
        assert_eq!(m.entrypoint, "bin/serve");
        assert_eq!(m.trusted_files, vec!["bin/serve".to_string()]);
        assert!(m.allowed_files.is_empty());
        assert_eq!(m.key_provider, "");
        assert_eq!(m.attestation_mode, AttestationMode::None);
    }

    #[test]
    fn rejects_trusted_and_allowed_overlap() {
        let text = "enclave_size = 1M\nthread_count = 1\nentrypoint = a\ntrusted_file = a\nallowed_file = a\n";
        match parse_manifest(text) {
            Err(ManifestError::InvariantViolation(msg)) => {
                assert!(msg.contains("both trusted and allowed"), "{msg}")
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_power_of_two_size() {
        let text = "enclave_size = 3M\nthread_count = 1\nentrypoint = a\ntrusted_file = a\n";
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::InvariantViolation(_))
        ));
    }

    #[test]
    fn rejects_size_below_one_mib() {
        let text = "enclave_size = 512K\nthread_count = 1\nentrypoint = a\ntrusted_file = a\n";
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::InvariantViolation(_))
        ));
    }

    #[test]
    fn rejects_entrypoint_not_trusted() {
        let text = "enclave_size = 1M\nthread_count = 1\nentrypoint = a\ntrusted_file = b\n";
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::InvariantViolation(_))
        ));
    }

    #[test]
    fn reports_syntax_error_with_line_number() {
        let text = "enclave_size = 1M\nnot a kv line\n";
        match parse_manifest(text) {
            Err(ManifestError::SyntaxError { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn reports_duplicate_scalar_key() {
        let text = "enclave_size = 1M\nenclave_size = 2M\n";
        match parse_manifest(text) {
            Err(ManifestError::DuplicateKey { line, key }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "enclave_size");
            }
            other => panic!("expected duplicate key, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# header\n\nenclave_size = 1M  # inline\nthread_count = 4\nentrypoint = a\ntrusted_file = a\n";
        assert!(parse_manifest(text).is_ok());
    }

    #[test]
    fn validate_passes_when_all_trusted_present() {
        let m = sample_manifest();
        let tree = tree_for(&m);
        assert!(validate_against_tree(&m, &tree).is_empty());
    }

    #[test]
    fn validate_reports_missing_trusted_file() {
        let m = sample_manifest();
        let mut tree = tree_for(&m);
        tree = {
            let mut t = FileTree::new();
            for (p, c) in tree.iter() {
                if p != "lib/model.cfg" {
                    t.insert(p, c.to_vec()).unwrap();
                }
            }
            t
        };
        let errors = validate_against_tree(&m, &tree);
        assert_eq!(
            errors,
            vec![ValidationError::MissingTrustedFile("lib/model.cfg".into())]
        );
    }

    #[test]
    fn missing_allowed_file_is_fine() {
        let m = sample_manifest();
        let tree = tree_for(&m); // no allowed files present
        assert!(validate_against_tree(&m, &tree).is_empty());
    }

    #[test]
    fn measurement_invariant_under_all_orderings_of_four_files() {
        // Permutation oracle: enumerate all 4! orderings and require one
        // measurement value.
        let files: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let mut tree = FileTree::new();
        for (i, f) in files.iter().enumerate() {
            tree.insert(f, vec![i as u8; 16]).unwrap();
        }

        let manifest_with = |order: &[usize]| Manifest {
            enclave_size: 1 << 20,
            thread_count: 2,
            entrypoint: "f0".into(),
            trusted_files: order.iter().map(|&i| files[i].clone()).collect(),
            allowed_files: vec![],
            key_provider: String::new(),
            attestation_mode: AttestationMode::Local,
        };

        let mut expected = None;
        let mut count = 0;
        permute(&mut [0, 1, 2, 3], 4, &mut |perm| {
            let m = manifest_with(perm);
            let d = compute_measurement(&m, &tree).unwrap();
            match expected {
                None => expected = Some(d),
                Some(e) => assert_eq!(e, d, "ordering {perm:?} changed the measurement"),
            }
            count += 1;
        });
        assert_eq!(count, 24);
    }

    fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == 1 {
            visit(items);
            return;
        }
        for i in 0..k {
            permute(items, k - 1, visit);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn measurement_changes_with_any_content_byte() {
        let mut r = StdRng::seed_from_u64(77);
        let m = sample_manifest();
        for _ in 0..100 {
            let mut tree = FileTree::new();
            let mut contents = Vec::new();
            for p in &m.trusted_files {
                let mut c = vec![0u8; 64];
                r.fill_bytes(&mut c);
                tree.insert(p, c.clone()).unwrap();
                contents.push(c);
            }
            let base = compute_measurement(&m, &tree).unwrap();

            let victim = r.gen_range(0..m.trusted_files.len());
            let byte = r.gen_range(0..contents[victim].len());
            let mut mutated = tree.clone();
            let mut c = contents[victim].clone();
            c[byte] ^= 0xff;
            mutated.insert(&m.trusted_files[victim], c).unwrap();

            assert_ne!(base, compute_measurement(&m, &mutated).unwrap());
        }
    }

    #[test]
    fn measurement_includes_scalars() {
        let m = sample_manifest();
        let tree = tree_for(&m);
        let base = compute_measurement(&m, &tree).unwrap();

        let mut threads = m.clone();
        threads.thread_count += 1;
        assert_ne!(base, compute_measurement(&threads, &tree).unwrap());

        let mut size = m.clone();
        size.enclave_size *= 2;
        assert_ne!(base, compute_measurement(&size, &tree).unwrap());
    }

    #[test]
    fn measurement_ignores_allowed_files() {
        let m = sample_manifest();
        let mut tree = tree_for(&m);
        let base = compute_measurement(&m, &tree).unwrap();
        tree.insert("data/cache", b"runtime junk".to_vec()).unwrap();
        assert_eq!(base, compute_measurement(&m, &tree).unwrap());
    }

    #[test]
    fn measurement_requires_valid_tree() {
        let m = sample_manifest();
        let tree = FileTree::new();
        assert!(matches!(
            compute_measurement(&m, &tree),
            Err(ManifestError::ValidationFailed(_))
        ));
    }

    #[test]
    fn render_parse_round_trip() {
        let m = sample_manifest();
        assert_eq!(parse_manifest(&m.render()).unwrap(), m);
    }

    #[test]
    fn path_normalization() {
        assert_eq!(normalize_path("a//b/./c").unwrap(), "a/b/c");
        assert_eq!(normalize_path("./x").unwrap(), "x");
        assert!(normalize_path("a/../b").is_err());
        assert!(normalize_path("").is_err());
        assert!(normalize_path("/").is_err());
    }

    #[test]
    fn tree_lookups_use_normalized_paths() {
        let mut tree = FileTree::new();
        tree.insert("a//b", b"x".to_vec()).unwrap();
        assert!(tree.contains("a/b"));
        assert_eq!(tree.get("./a/b").unwrap(), b"x");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::RngCore;

        fn arb_path() -> impl Strategy<Value = String> {
            proptest::collection::vec("[a-z][a-z0-9_]{0,6}", 1..3).prop_map(|v| v.join("/"))
        }

        fn arb_manifest() -> impl Strategy<Value = Manifest> {
            (
                1u32..10,                                        // enclave_size = 1MiB << n
                1u32..64,                                        // threads
                proptest::collection::btree_set(arb_path(), 1..6), // trusted
                proptest::collection::btree_set(arb_path(), 0..4), // allowed candidates
                "[a-z:/]{0,12}",
                0u8..3,
            )
                .prop_map(|(shift, threads, trusted, allowed, provider, mode)| {
                    let trusted: Vec<String> = trusted.into_iter().collect();
                    let allowed: Vec<String> = allowed
                        .into_iter()
                        .filter(|p| !trusted.contains(p))
                        .collect();
                    Manifest {
                        enclave_size: MIN_ENCLAVE_SIZE << shift,
                        thread_count: threads,
                        entrypoint: trusted[0].clone(),
                        trusted_files: trusted,
                        allowed_files: allowed,
                        key_provider: provider,
                        attestation_mode: match mode {
                            0 => AttestationMode::None,
                            1 => AttestationMode::Local,
                            _ => AttestationMode::Remote,
                        },
                    }
                })
        }

        proptest! {
            #[test]
            fn parse_render_round_trip(m in arb_manifest()) {
                prop_assert!(m.check_invariants().is_ok());
                prop_assert_eq!(parse_manifest(&m.render()).unwrap(), m);
            }

            #[test]
            fn measurement_is_pure_function_of_inputs(m in arb_manifest(), seed: u64) {
                let mut r = StdRng::seed_from_u64(seed);
                let mut tree = FileTree::new();
                for p in &m.trusted_files {
                    let mut content = vec![0u8; 32];
                    r.fill_bytes(&mut content);
                    tree.insert(p, content).unwrap();
                }
                let a = compute_measurement(&m, &tree).unwrap();
                let b = compute_measurement(&m, &tree).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
