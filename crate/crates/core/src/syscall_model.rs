//! Syscall and errno lookup tables.
//!
//! One architecture table ships built in (x86-64 Linux). Other architectures
//! can be loaded from a `name,number` CSV file.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::tables::{ERRNOS, X86_64_SYSCALLS};

/// Names that are kernel aliases on x86-64 rather than distinct entries.
/// They resolve to the aliased number; reverse lookup yields the canonical name.
const X86_64_ALIASES: &[(&str, &str)] = &[("sendfile64", "sendfile")];

/// The nine syscalls selected as relevant for fault injection experiments.
pub const RELEVANT_SYSCALLS: [&str; 9] = [
    "open",
    "write",
    "writev",
    "read",
    "readv",
    "sendfile",
    "sendfile64",
    "poll",
    "select",
];

/// Errnos related to resource and permission failures used by default campaigns.
pub const DEFAULT_ERRNOS: [&str; 6] = ["EACCES", "EPERM", "ENOENT", "EIO", "EINTR", "ENOSYS"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown syscall `{name}` for {arch}{}", candidates_hint(.candidates))]
    UnknownSyscall {
        name: String,
        arch: String,
        candidates: Vec<String>,
    },
    #[error("unknown errno `{name}`{}", candidates_hint(.candidates))]
    UnknownErrno { name: String, candidates: Vec<String> },
    #[error("syscall table line {line}: {reason}")]
    BadTable { line: usize, reason: String },
    #[error("delay must be a non-negative number of milliseconds, got {0}")]
    NegativeDelay(i64),
    #[error("i/o error reading syscall table: {0}")]
    Io(String),
}

fn candidates_hint(candidates: &[String]) -> String {
    if candidates.is_empty() {
        String::new()
    } else {
        format!(" (did you mean: {})", candidates.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SyscallId {
    pub name: String,
    pub number: u32,
}

impl SyscallId {
    /// Id for a number the table cannot decode.
    pub fn unknown(number: u64) -> Self {
        SyscallId {
            name: format!("unknown:{number}"),
            number: number.min(u32::MAX as u64) as u32,
        }
    }
}

impl fmt::Display for SyscallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ErrnoCode {
    pub name: String,
    pub value: i32,
}

impl fmt::Display for ErrnoCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Injected delay in milliseconds. Zero means no delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelaySpec {
    pub millis: u64,
}

impl DelaySpec {
    pub const NONE: DelaySpec = DelaySpec { millis: 0 };

    pub fn from_millis(millis: u64) -> Self {
        DelaySpec { millis }
    }

    pub fn try_from_millis(millis: i64) -> Result<Self, ModelError> {
        u64::try_from(millis)
            .map(DelaySpec::from_millis)
            .map_err(|_| ModelError::NegativeDelay(millis))
    }

    pub fn is_none(&self) -> bool {
        self.millis == 0
    }
}

impl fmt::Display for DelaySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.millis == 0 {
            f.write_str("-")
        } else if self.millis % 1000 == 0 {
            write!(f, "{}s", self.millis / 1000)
        } else {
            write!(f, "{}ms", self.millis)
        }
    }
}

/// A name↔number table for one architecture.
#[derive(Debug, Clone)]
pub struct SyscallTable {
    arch: String,
    by_name: HashMap<String, u32>,
    by_number: BTreeMap<u32, String>,
}

impl SyscallTable {
    /// The built-in x86-64 Linux table.
    pub fn x86_64() -> &'static SyscallTable {
        static TABLE: OnceLock<SyscallTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let mut table = SyscallTable::empty("x86-64");
            for &(name, number) in X86_64_SYSCALLS {
                table.by_name.insert(name.to_owned(), number);
                table.by_number.insert(number, name.to_owned());
            }
            for &(alias, target) in X86_64_ALIASES {
                let number = table.by_name[target];
                table.by_name.insert(alias.to_owned(), number);
            }
            table
        })
    }

    /// Default table for the host.
    pub fn host() -> &'static SyscallTable {
        Self::x86_64()
    }

    fn empty(arch: &str) -> Self {
        SyscallTable {
            arch: arch.to_owned(),
            by_name: HashMap::new(),
            by_number: BTreeMap::new(),
        }
    }

    /// Parses a `name,number` CSV. A header line `name,number` is allowed;
    /// blank lines and `#` comments are skipped.
    pub fn from_csv<R: Read>(arch: &str, mut reader: R) -> Result<Self, ModelError> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| ModelError::Io(e.to_string()))?;
        let mut table = SyscallTable::empty(arch);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if line == 1 && trimmed.eq_ignore_ascii_case("name,number") {
                continue;
            }
            let (name, number) = trimmed.split_once(',').ok_or_else(|| ModelError::BadTable {
                line,
                reason: "expected `name,number`".into(),
            })?;
            let name = name.trim().to_ascii_lowercase();
            if name.is_empty() {
                return Err(ModelError::BadTable { line, reason: "empty name".into() });
            }
            let number: u32 = number.trim().parse().map_err(|_| ModelError::BadTable {
                line,
                reason: format!("`{}` is not a non-negative integer", number.trim()),
            })?;
            if table.by_name.contains_key(&name) {
                return Err(ModelError::BadTable { line, reason: format!("duplicate name `{name}`") });
            }
            if let Some(prev) = table.by_number.get(&number) {
                return Err(ModelError::BadTable {
                    line,
                    reason: format!("number {number} already assigned to `{prev}`"),
                });
            }
            table.by_name.insert(name.clone(), number);
            table.by_number.insert(number, name);
        }
        Ok(table)
    }

    pub fn from_csv_file(arch: &str, path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path).map_err(|e| ModelError::Io(e.to_string()))?;
        Self::from_csv(arch, file)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.by_number.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_number.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Result<SyscallId, ModelError> {
        let canonical = name.trim().to_ascii_lowercase();
        match self.by_name.get(&canonical) {
            Some(&number) => Ok(SyscallId { name: canonical, number }),
            None => Err(ModelError::UnknownSyscall {
                name: name.to_owned(),
                arch: self.arch.clone(),
                candidates: nearest(&canonical, self.by_name.keys().map(String::as_str)),
            }),
        }
    }

    /// Decodes a raw number, yielding `unknown:<n>` for numbers outside the table.
    pub fn decode(&self, number: u64) -> SyscallId {
        u32::try_from(number)
            .ok()
            .and_then(|n| self.by_number.get(&n).map(|name| SyscallId { name: name.clone(), number: n }))
            .unwrap_or_else(|| SyscallId::unknown(number))
    }

    pub fn name_of(&self, number: u32) -> Option<&str> {
        self.by_number.get(&number).map(String::as_str)
    }
}

fn nearest<'a>(needle: &str, haystack: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = haystack
        .map(|cand| (strsim::levenshtein(needle, &cand.to_ascii_lowercase()), cand))
        .filter(|(d, _)| *d <= 3)
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, c)| c.to_owned()).collect()
}

pub fn syscall_by_name(name: &str, table: &SyscallTable) -> Result<SyscallId, ModelError> {
    table.lookup(name)
}

fn errno_table() -> &'static HashMap<&'static str, i32> {
    static TABLE: OnceLock<HashMap<&'static str, i32>> = OnceLock::new();
    TABLE.get_or_init(|| ERRNOS.iter().copied().collect())
}

pub fn errno_by_name(name: &str) -> Result<ErrnoCode, ModelError> {
    let upper = name.trim().to_ascii_uppercase();
    errno_table()
        .get_key_value(upper.as_str())
        .map(|(&name, &value)| ErrnoCode { name: name.to_owned(), value })
        .ok_or_else(|| ModelError::UnknownErrno {
            name: name.to_owned(),
            candidates: nearest(&upper, errno_table().keys().copied()),
        })
}

pub fn errno_by_value(value: i32) -> Option<ErrnoCode> {
    ERRNOS
        .iter()
        .find(|(_, v)| *v == value)
        .map(|&(name, value)| ErrnoCode { name: name.to_owned(), value })
}

/// Every known errno, ascending by value.
pub fn all_errnos() -> impl Iterator<Item = ErrnoCode> {
    ERRNOS.iter().map(|&(name, value)| ErrnoCode { name: name.to_owned(), value })
}

pub fn relevant_syscalls() -> Vec<SyscallId> {
    let table = SyscallTable::host();
    RELEVANT_SYSCALLS
        .iter()
        .map(|n| table.lookup(n).expect("relevant syscall missing from host table"))
        .collect()
}

pub fn default_errnos() -> Vec<ErrnoCode> {
    DEFAULT_ERRNOS
        .iter()
        .map(|n| errno_by_name(n).expect("default errno missing"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Parses the kernel header directly; independent of the generated table.
    fn header_table() -> Option<HashMap<String, u32>> {
        let text = std::fs::read_to_string("/usr/include/x86_64-linux-gnu/asm/unistd_64.h")
            .or_else(|_| std::fs::read_to_string("/usr/include/asm/unistd_64.h"))
            .ok()?;
        let mut map = HashMap::new();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            if parts.next() != Some("#define") {
                continue;
            }
            let (Some(name), Some(num)) = (parts.next(), parts.next()) else { continue };
            if let (Some(name), Ok(num)) = (name.strip_prefix("__NR_"), num.parse()) {
                map.insert(name.to_owned(), num);
            }
        }
        Some(map)
    }

    #[test]
    fn read_and_open_match_kernel_header() {
        let t = SyscallTable::x86_64();
        assert_eq!(t.lookup("read").unwrap(), SyscallId { name: "read".into(), number: 0 });
        assert_eq!(t.lookup("open").unwrap(), SyscallId { name: "open".into(), number: 2 });
        if let Some(header) = header_table() {
            assert_eq!(header["read"], 0);
            assert_eq!(header["open"], 2);
            for (name, num) in &header {
                assert_eq!(t.lookup(name).unwrap().number, *num, "{name}");
            }
        }
    }

    #[test]
    fn libc_constants_agree() {
        let t = SyscallTable::x86_64();
        for (name, num) in [
            ("read", libc::SYS_read),
            ("write", libc::SYS_write),
            ("open", libc::SYS_open),
            ("writev", libc::SYS_writev),
            ("readv", libc::SYS_readv),
            ("sendfile", libc::SYS_sendfile),
            ("poll", libc::SYS_poll),
            ("select", libc::SYS_select),
            ("futex", libc::SYS_futex),
        ] {
            assert_eq!(t.lookup(name).unwrap().number as i64, num);
        }
    }

    #[test]
    fn lookup_is_case_insensitive_and_canonical() {
        let t = SyscallTable::x86_64();
        assert_eq!(t.lookup("OpEn").unwrap().name, "open");
        let once = t.lookup("Write").unwrap();
        assert_eq!(t.lookup(&once.name).unwrap(), once);
    }

    #[test]
    fn unknown_syscall_lists_candidates() {
        let err = SyscallTable::x86_64().lookup("notasyscall").unwrap_err();
        assert!(matches!(err, ModelError::UnknownSyscall { .. }));
        let err = SyscallTable::x86_64().lookup("wrte").unwrap_err();
        match err {
            ModelError::UnknownSyscall { candidates, .. } => assert!(candidates.contains(&"write".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errnos_match_libc() {
        assert_eq!(errno_by_name("EACCES").unwrap().value, 13);
        assert_eq!(errno_by_name("ENOSYS").unwrap().value, 38);
        assert!(errno_by_name("EZZZ").is_err());
        for (name, v) in [
            ("EACCES", libc::EACCES),
            ("EPERM", libc::EPERM),
            ("ENOENT", libc::ENOENT),
            ("EIO", libc::EIO),
            ("EINTR", libc::EINTR),
            ("ENOSYS", libc::ENOSYS),
            ("EAGAIN", libc::EAGAIN),
        ] {
            assert_eq!(errno_by_name(name).unwrap().value, v);
        }
    }

    #[test]
    fn errno_table_is_a_bijection() {
        let names: HashSet<_> = ERRNOS.iter().map(|e| e.0).collect();
        let values: HashSet<_> = ERRNOS.iter().map(|e| e.1).collect();
        assert_eq!(names.len(), ERRNOS.len());
        assert_eq!(values.len(), ERRNOS.len());
        assert!(ERRNOS.iter().all(|e| e.1 > 0));
    }

    #[test]
    fn default_errnos_are_distinct() {
        let values: HashSet<_> = default_errnos().into_iter().map(|e| e.value).collect();
        assert_eq!(values.len(), 6);
    }

    #[test]
    fn relevant_set_has_nine() {
        let names: Vec<_> = relevant_syscalls().into_iter().map(|s| s.name).collect();
        assert_eq!(names.len(), 9);
        assert!(names.contains(&"open".to_string()));
        assert!(names.contains(&"sendfile64".to_string()));
        assert!(!names.contains(&"futex".to_string()));
    }

    #[test]
    fn canonical_numbers_are_unique() {
        let t = SyscallTable::x86_64();
        let numbers: HashSet<_> = X86_64_SYSCALLS.iter().map(|s| s.1).collect();
        assert_eq!(numbers.len(), X86_64_SYSCALLS.len());
        assert_eq!(t.len(), X86_64_SYSCALLS.len());
        assert_eq!(t.decode(40).name, "sendfile");
        assert_eq!(t.decode(100_000).name, "unknown:100000");
    }

    #[test]
    fn csv_override() {
        let t = SyscallTable::from_csv("toy", "name,number\nfoo,1\n# c\n\nBar,7\n".as_bytes()).unwrap();
        assert_eq!(t.lookup("bar").unwrap().number, 7);
        assert_eq!(t.name_of(1), Some("foo"));
        let dup = SyscallTable::from_csv("toy", "foo,1\nbaz,1\n".as_bytes()).unwrap_err();
        assert!(matches!(dup, ModelError::BadTable { line: 2, .. }));
        let neg = SyscallTable::from_csv("toy", "foo,-1\n".as_bytes()).unwrap_err();
        assert!(matches!(neg, ModelError::BadTable { line: 1, .. }));
    }

    #[test]
    fn delay_display() {
        assert_eq!(DelaySpec::from_millis(0).to_string(), "-");
        assert_eq!(DelaySpec::from_millis(1000).to_string(), "1s");
        assert_eq!(DelaySpec::from_millis(150).to_string(), "150ms");
        assert!(DelaySpec::try_from_millis(-1).is_err());
    }
}
