//! The protocol manager: loads protocol definitions from files, URLs and
//! repository descriptors, keeps the registry of resolved protocols, and
//! persists raw definitions to a local cache so they can be recovered after a
//! restart.
//!
//! The registry is an ordinary value: share one per platform or give each
//! agent its own. Resolved protocols are handed out as `Arc`s and are
//! immutable; wrap the registry itself in a lock if loads must race reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use quick_xml::events::Event;
use quick_xml::{Reader, XmlVersion};
use thiserror::Error;

use crate::protocol::{
    parse_protocol, resolve, write_protocol, Protocol, ProtocolError, ProtocolId, ProtocolLookup,
    ResolvedProtocol,
};

/// Default directory for the local protocol cache.
pub const DEFAULT_CACHE_DIR: &str = ".acre-cache";

const DEFAULT_HTTP_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_FETCH_BYTES: u64 = 10 * 1024 * 1024;

/// Where a definition lives: a filesystem path or an HTTP(S) URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Path(PathBuf),
    Url(String),
}

impl Location {
    /// Strings starting with `http://` or `https://` are URLs, everything
    /// else is a filesystem path.
    pub fn parse(s: &str) -> Location {
        if s.starts_with("http://") || s.starts_with("https://") {
            Location::Url(s.to_string())
        } else {
            Location::Path(PathBuf::from(s))
        }
    }

    /// Resolves a repository entry's `href` against this descriptor
    /// location. Absolute URLs pass through unchanged.
    pub fn join(&self, relative: &str) -> Location {
        if relative.starts_with("http://") || relative.starts_with("https://") {
            return Location::Url(relative.to_string());
        }
        match self {
            Location::Path(path) => {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                Location::Path(base.join(relative))
            }
            Location::Url(url) => match url.rfind('/') {
                Some(i) => Location::Url(format!("{}{relative}", &url[..=i])),
                None => Location::Url(relative.to_string()),
            },
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Path(path) => write!(f, "{}", path.display()),
            Location::Url(url) => f.write_str(url),
        }
    }
}

impl From<&Path> for Location {
    fn from(path: &Path) -> Self {
        Location::Path(path.to_path_buf())
    }
}

impl From<PathBuf> for Location {
    fn from(path: PathBuf) -> Self {
        Location::Path(path)
    }
}

/// A repository definition: the protocols a repository makes available, as
/// (declared identity, href relative to the descriptor) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepositoryDescriptor {
    pub entries: Vec<(ProtocolId, String)>,
}

/// Parses a `<repository>` descriptor:
/// `<repository><protocol namespace name version href/></repository>`.
pub fn parse_descriptor(xml: &[u8]) -> Result<RepositoryDescriptor, RepositoryError> {
    let text = std::str::from_utf8(xml)
        .map_err(|e| RepositoryError::Descriptor(format!("invalid UTF-8: {e}")))?;
    let mut reader = Reader::from_str(text);
    let bad = |message: String| RepositoryError::Descriptor(message);

    // Find the <repository> root; a self-closing root is an empty descriptor.
    loop {
        match reader.read_event().map_err(|e| bad(e.to_string()))? {
            Event::Start(e) if e.name().local_name().into_inner() == b"repository" => break,
            Event::Empty(e) if e.name().local_name().into_inner() == b"repository" => {
                return Ok(RepositoryDescriptor {
                    entries: Vec::new(),
                })
            }
            Event::Start(e) | Event::Empty(e) => {
                return Err(bad(format!(
                    "unexpected root <{}>",
                    String::from_utf8_lossy(e.name().as_ref())
                )))
            }
            Event::Eof => return Err(bad("no <repository> root element".into())),
            _ => {}
        }
    }

    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    loop {
        match reader.read_event().map_err(|e| bad(e.to_string()))? {
            Event::Empty(e) | Event::Start(e)
                if e.name().local_name().into_inner() == b"protocol" =>
            {
                let mut namespace = None;
                let mut name = None;
                let mut version = None;
                let mut href = None;
                for attr in e.attributes() {
                    let attr = attr.map_err(|e| bad(e.to_string()))?;
                    let value = attr
                        .normalized_value(XmlVersion::Implicit1_0)
                        .map_err(|e| bad(e.to_string()))?
                        .into_owned();
                    match attr.key.local_name().into_inner() {
                        b"namespace" => namespace = Some(value),
                        b"name" => name = Some(value),
                        b"version" => version = Some(value),
                        b"href" => href = Some(value),
                        other => {
                            return Err(bad(format!(
                                "unknown attribute `{}` on <protocol>",
                                String::from_utf8_lossy(other)
                            )))
                        }
                    }
                }
                let missing = |what: &str| bad(format!("<protocol> entry is missing `{what}`"));
                let id = ProtocolId::new(
                    namespace
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| missing("namespace"))?,
                    name.filter(|s| !s.is_empty())
                        .ok_or_else(|| missing("name"))?,
                    version
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| missing("version"))?,
                );
                let href = href
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| missing("href"))?;
                if !seen.insert(id.clone()) {
                    return Err(bad(format!("duplicate entry {id}")));
                }
                entries.push((id, href));
            }
            Event::Start(e) | Event::Empty(e) => {
                return Err(bad(format!(
                    "unexpected <{}> inside <repository>",
                    String::from_utf8_lossy(e.name().as_ref())
                )))
            }
            Event::End(e) if e.name().local_name().into_inner() == b"repository" => break,
            Event::End(_) => {}
            Event::Eof => return Err(bad("unexpected end of file".into())),
            _ => {}
        }
    }
    Ok(RepositoryDescriptor { entries })
}

/// Result of a cache recovery pass. Recovery never fails outright: corrupt
/// or unresolvable entries are skipped and reported as warnings.
#[derive(Debug, Default)]
pub struct CacheRecovery {
    pub recovered: Vec<ProtocolId>,
    pub warnings: Vec<String>,
}

struct RegistryEntry {
    raw: Protocol,
    resolved: Arc<ResolvedProtocol>,
}

/// Registry of loaded protocols, keyed by identity triple, with optional
/// local persistence.
pub struct Registry {
    entries: BTreeMap<ProtocolId, RegistryEntry>,
    cache_dir: Option<PathBuf>,
    http_timeout: Duration,
}

impl ProtocolLookup for Registry {
    fn lookup(&self, id: &ProtocolId) -> Option<&Protocol> {
        self.entries.get(id).map(|entry| &entry.raw)
    }
}

impl Registry {
    /// A registry persisting loaded protocols under `cache_dir` (created on
    /// first use).
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Registry {
            entries: BTreeMap::new(),
            cache_dir: Some(cache_dir.into()),
            http_timeout: DEFAULT_HTTP_TIMEOUT,
        }
    }

    /// A registry without local persistence.
    pub fn ephemeral() -> Self {
        Registry {
            entries: BTreeMap::new(),
            cache_dir: None,
            http_timeout: DEFAULT_HTTP_TIMEOUT,
        }
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir.as_deref()
    }

    pub fn set_http_timeout(&mut self, timeout: Duration) {
        self.http_timeout = timeout;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ProtocolId> {
        self.entries.keys()
    }

    /// The resolved protocol for an exact identity triple.
    pub fn get(&self, id: &ProtocolId) -> Option<Arc<ResolvedProtocol>> {
        self.entries
            .get(id)
            .map(|entry| Arc::clone(&entry.resolved))
    }

    /// The raw (unresolved) definition, as parsed from its source.
    pub fn raw(&self, id: &ProtocolId) -> Option<&Protocol> {
        self.entries.get(id).map(|entry| &entry.raw)
    }

    pub fn resolved_protocols(&self) -> impl Iterator<Item = &Arc<ResolvedProtocol>> {
        self.entries.values().map(|entry| &entry.resolved)
    }

    /// Loads, validates, registers and caches the definition at `location`.
    /// Loading an identical definition again is idempotent; the same triple
    /// with different content is a conflict.
    pub fn load_protocol(&mut self, location: &Location) -> Result<ProtocolId, RepositoryError> {
        let bytes = self.fetch(location)?;
        let raw = parse_protocol(&bytes).map_err(|source| RepositoryError::InvalidProtocol {
            location: location.to_string(),
            source,
        })?;
        let (id, newly_registered) = self.register_raw(raw.clone(), &location.to_string())?;
        if newly_registered {
            self.write_cache(&raw)?;
        }
        Ok(id)
    }

    /// Loads every protocol listed by the repository descriptor at
    /// `location`, in dependency order (imports first). If any entry fails,
    /// the registry is rolled back to its prior state and the cache is left
    /// untouched.
    pub fn load_repository(
        &mut self,
        location: &Location,
    ) -> Result<Vec<ProtocolId>, RepositoryError> {
        let bytes = self.fetch(location)?;
        let descriptor = parse_descriptor(&bytes)?;

        let mut fetched: Vec<Protocol> = Vec::new();
        for (declared, href) in &descriptor.entries {
            let entry_location = location.join(href);
            let bytes = self.fetch(&entry_location)?;
            let raw =
                parse_protocol(&bytes).map_err(|source| RepositoryError::InvalidProtocol {
                    location: entry_location.to_string(),
                    source,
                })?;
            if &raw.id != declared {
                return Err(RepositoryError::DescriptorMismatch {
                    declared: Box::new(declared.clone()),
                    found: Box::new(raw.id),
                    location: entry_location.to_string(),
                });
            }
            fetched.push(raw);
        }

        let order = self
            .dependency_order(&fetched)
            .map_err(|stuck| RepositoryError::DescriptorCycle(stuck))?;

        // Register everything before touching the cache so a failure can
        // roll back cleanly.
        let checkpoint: Vec<ProtocolId> = self.entries.keys().cloned().collect();
        let mut registered = Vec::new();
        for index in order {
            let raw = fetched[index].clone();
            let origin = raw.id.to_string();
            match self.register_raw(raw, &origin) {
                Ok((id, newly)) => {
                    if newly {
                        registered.push(id);
                    }
                }
                Err(error) => {
                    self.entries.retain(|id, _| checkpoint.contains(id));
                    return Err(error);
                }
            }
        }
        for id in &registered {
            let raw = self.entries[id].raw.clone();
            self.write_cache(&raw)?;
        }
        Ok(registered)
    }

    /// Re-registers every protocol found in the cache directory. Corrupt or
    /// unresolvable cache entries are skipped with a warning.
    pub fn recover_cache(&mut self) -> CacheRecovery {
        let mut recovery = CacheRecovery::default();
        let Some(dir) = self.cache_dir.clone() else {
            return recovery;
        };
        if !dir.exists() {
            return recovery;
        }
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(iter) => iter
                .filter_map(|entry| entry.ok())
                .map(|entry| entry.path())
                .filter(|path| path.extension().is_some_and(|ext| ext == "xml"))
                .collect(),
            Err(error) => {
                recovery.warnings.push(format!(
                    "cannot read cache directory {}: {error}",
                    dir.display()
                ));
                return recovery;
            }
        };
        files.sort();

        let mut parsed: Vec<Protocol> = Vec::new();
        for path in files {
            match fs::read(&path) {
                Ok(bytes) => match parse_protocol(&bytes) {
                    Ok(raw) => parsed.push(raw),
                    Err(error) => recovery
                        .warnings
                        .push(format!("skipping cache file {}: {error}", path.display())),
                },
                Err(error) => recovery
                    .warnings
                    .push(format!("skipping cache file {}: {error}", path.display())),
            }
        }

        match self.dependency_order(&parsed) {
            Ok(order) => {
                for index in order {
                    let raw = parsed[index].clone();
                    let origin = raw.id.to_string();
                    match self.register_raw(raw, &origin) {
                        Ok((id, newly)) => {
                            if newly {
                                recovery.recovered.push(id);
                            }
                        }
                        Err(error) => recovery
                            .warnings
                            .push(format!("skipping cached protocol: {error}")),
                    }
                }
            }
            Err(stuck) => {
                recovery.warnings.push(format!(
                    "import cycle among cached protocols, skipping: {}",
                    stuck.join(", ")
                ));
            }
        }
        recovery
    }

    // Resolves and registers a raw definition. Returns the id and whether it
    // was newly registered (false for an identical re-load).
    fn register_raw(
        &mut self,
        raw: Protocol,
        origin: &str,
    ) -> Result<(ProtocolId, bool), RepositoryError> {
        if let Some(existing) = self.entries.get(&raw.id) {
            return if existing.raw == raw {
                Ok((raw.id, false))
            } else {
                Err(RepositoryError::Conflict { id: raw.id })
            };
        }
        let resolved = resolve(&raw, self).map_err(|source| RepositoryError::InvalidProtocol {
            location: origin.to_string(),
            source,
        })?;
        let id = raw.id.clone();
        self.entries.insert(
            id.clone(),
            RegistryEntry {
                raw,
                resolved: Arc::new(resolved),
            },
        );
        Ok((id, true))
    }

    // Orders the given definitions so that any entry importing another entry
    // of the set comes after it. Imports satisfied by the registry (or
    // unsatisfiable anywhere) impose no ordering. Err carries the ids stuck
    // in a cycle.
    fn dependency_order(&self, protocols: &[Protocol]) -> Result<Vec<usize>, Vec<String>> {
        let in_set: BTreeMap<&ProtocolId, usize> = protocols
            .iter()
            .enumerate()
            .map(|(i, p)| (&p.id, i))
            .collect();
        let mut placed: Vec<bool> = vec![false; protocols.len()];
        let mut order = Vec::with_capacity(protocols.len());
        while order.len() < protocols.len() {
            let mut progressed = false;
            for (index, protocol) in protocols.iter().enumerate() {
                if placed[index] {
                    continue;
                }
                let ready = protocol
                    .imports
                    .iter()
                    .all(|import| match in_set.get(import) {
                        Some(&dep) => placed[dep] || dep == index,
                        None => true,
                    });
                if ready {
                    placed[index] = true;
                    order.push(index);
                    progressed = true;
                }
            }
            if !progressed {
                return Err(protocols
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !placed[*i])
                    .map(|(_, p)| p.id.to_string())
                    .collect());
            }
        }
        Ok(order)
    }

    fn write_cache(&self, raw: &Protocol) -> Result<(), RepositoryError> {
        let Some(dir) = &self.cache_dir else {
            return Ok(());
        };
        let io_error = |source| RepositoryError::Io {
            location: dir.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io_error)?;
        let path = dir.join(cache_file_name(&raw.id));
        fs::write(&path, write_protocol(raw)).map_err(|source| RepositoryError::Io {
            location: path.display().to_string(),
            source,
        })
    }

    fn fetch(&self, location: &Location) -> Result<Vec<u8>, RepositoryError> {
        match location {
            Location::Path(path) => fs::read(path).map_err(|source| RepositoryError::Io {
                location: path.display().to_string(),
                source,
            }),
            Location::Url(url) => {
                let agent = ureq::AgentBuilder::new().timeout(self.http_timeout).build();
                let response = agent.get(url).call().map_err(|e| RepositoryError::Http {
                    url: url.clone(),
                    message: e.to_string(),
                })?;
                let mut bytes = Vec::new();
                response
                    .into_reader()
                    .take(MAX_FETCH_BYTES)
                    .read_to_end(&mut bytes)
                    .map_err(|e| RepositoryError::Http {
                        url: url.clone(),
                        message: e.to_string(),
                    })?;
                Ok(bytes)
            }
        }
    }
}

/// Cache file name for a protocol: `namespace_name_version.xml` with
/// characters outside `[A-Za-z0-9_.-]` replaced by `-`.
pub fn cache_file_name(id: &ProtocolId) -> String {
    let sanitize = |s: &str| {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') {
                    c
                } else {
                    '-'
                }
            })
            .collect::<String>()
    };
    format!(
        "{}_{}_{}.xml",
        sanitize(id.namespace()),
        sanitize(id.name()),
        sanitize(id.version())
    )
}

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("cannot read {location}: {source}")]
    Io {
        location: String,
        #[source]
        source: std::io::Error,
    },
    #[error("HTTP GET {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("{location}: {source}")]
    InvalidProtocol {
        location: String,
        #[source]
        source: ProtocolError,
    },
    #[error("protocol {id} is already registered with different content")]
    Conflict { id: ProtocolId },
    #[error("invalid repository descriptor: {0}")]
    Descriptor(String),
    #[error("descriptor declares {declared} but {location} defines {found}")]
    DescriptorMismatch {
        declared: Box<ProtocolId>,
        found: Box<ProtocolId>,
        location: String,
    },
    #[error("import cycle across repository entries: {}", .0.join(", "))]
    DescriptorCycle(Vec<String>),
}
