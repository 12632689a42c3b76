use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{DecodeError, Decoder, Encoder};

use super::{TranslationTable, VirtError};

/// Prefix rewrite rules for file paths. The longest matching prefix wins and
/// is applied exactly once; a prefix only matches at a path-component boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathMap {
    rules: Vec<(String, String)>,
}

fn prefix_matches(path: &str, prefix: &str) -> bool {
    path.strip_prefix(prefix)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('/') || prefix.ends_with('/'))
}

impl PathMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a rule, replacing any existing rule with the same source prefix.
    pub fn add_rule(&mut self, from: &str, to: &str) {
        match self.rules.iter_mut().find(|(f, _)| f == from) {
            Some(rule) => rule.1 = to.to_string(),
            None => self.rules.push((from.to_string(), to.to_string())),
        }
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn rewrite_prefix(&self, path: &str) -> String {
        let best = self
            .rules
            .iter()
            .filter(|(from, _)| prefix_matches(path, from))
            .max_by_key(|(from, _)| from.len());
        match best {
            Some((from, to)) => format!("{to}{}", &path[from.len()..]),
            None => path.to_string(),
        }
    }

    /// Prefix rewrite, then translation of `/proc/<virtual tid>/...` to the
    /// real tid when a tid table is supplied.
    pub fn rewrite(&self, path: &str, tids: Option<&TranslationTable>) -> Result<String, VirtError> {
        let path = self.rewrite_prefix(path);
        match tids {
            Some(table) => translate_proc(&path, table),
            None => Ok(path),
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u32(self.rules.len() as u32);
        for (f, t) in &self.rules {
            e.str(f).str(t);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = d.u32()?;
        let rules = (0..n)
            .map(|_| Ok((d.string()?, d.string()?)))
            .collect::<Result<_, DecodeError>>()?;
        Ok(Self { rules })
    }
}

fn translate_proc(path: &str, tids: &TranslationTable) -> Result<String, VirtError> {
    let Some(rest) = path.strip_prefix("/proc/") else {
        return Ok(path.to_string());
    };
    let (head, tail) = rest.split_at(rest.find('/').unwrap_or(rest.len()));
    match head.parse::<u64>() {
        Ok(vid) => Ok(format!("/proc/{}{tail}", tids.to_real(vid)?)),
        Err(_) => Ok(path.to_string()),
    }
}

/// Environment overrides layered over the runtime's real environment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvMap {
    overrides: BTreeMap<String, String>,
    unset: BTreeSet<String>,
}

impl EnvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.unset.remove(key);
        self.overrides.insert(key.to_string(), value.to_string());
    }

    pub fn unset(&mut self, key: &str) {
        self.overrides.remove(key);
        self.unset.insert(key.to_string());
    }

    /// `Some(Some(v))` for an override, `Some(None)` for an unset key, `None`
    /// when the lookup should fall through to the runtime.
    pub fn get(&self, key: &str) -> Option<Option<&str>> {
        if let Some(v) = self.overrides.get(key) {
            return Some(Some(v));
        }
        self.unset.contains(key).then_some(None)
    }

    pub fn lookup(&self, key: &str, fallback: impl FnOnce() -> Option<String>) -> Option<String> {
        match self.get(key) {
            Some(v) => v.map(str::to_owned),
            None => fallback(),
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u32(self.overrides.len() as u32);
        for (k, v) in &self.overrides {
            e.str(k).str(v);
        }
        e.u32(self.unset.len() as u32);
        for k in &self.unset {
            e.str(k);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let mut m = EnvMap::new();
        for _ in 0..d.u32()? {
            let (k, v) = (d.string()?, d.string()?);
            m.overrides.insert(k, v);
        }
        for _ in 0..d.u32()? {
            m.unset.insert(d.string()?);
        }
        Ok(m)
    }
}

/// Path and environment rules, as loaded from a `rewrite` / `setenv` /
/// `unsetenv` config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VirtConfig {
    pub paths: PathMap,
    pub env: EnvMap,
}

impl VirtConfig {
    pub fn parse(text: &str) -> Result<Self, VirtError> {
        let mut cfg = VirtConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| VirtError::Config {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.splitn(3, char::is_whitespace);
            match (parts.next(), parts.next(), parts.next().map(str::trim)) {
                (Some("rewrite"), Some(from), Some(to)) if !to.contains(char::is_whitespace) => {
                    cfg.paths.add_rule(from, to)
                }
                (Some("setenv"), Some(k), Some(v)) => cfg.env.set(k, v),
                (Some("setenv"), Some(k), None) => cfg.env.set(k, ""),
                (Some("unsetenv"), Some(k), None) => cfg.env.unset(k),
                (Some(kw @ ("rewrite" | "setenv" | "unsetenv")), _, _) => {
                    return Err(bad(&format!("malformed `{kw}` line")))
                }
                (Some(other), _, _) => return Err(bad(&format!("unknown directive `{other}`"))),
                (None, _, _) => unreachable!("non-empty line"),
            }
        }
        Ok(cfg)
    }

    /// Apply `other` on top of `self`: its rules replace same-prefix rules and
    /// its env entries win.
    pub fn merge(&mut self, other: &VirtConfig) {
        for (f, t) in other.paths.rules() {
            self.paths.add_rule(f, t);
        }
        for (k, v) in &other.env.overrides {
            self.env.set(k, v);
        }
        for k in &other.env.unset {
            self.env.unset(k);
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        self.paths.encode(e);
        self.env.encode(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            paths: PathMap::decode(d)?,
            env: EnvMap::decode(d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::virt::IdClass;

    #[test]
    fn run_slot_rewrite() {
        let mut m = PathMap::new();
        m.add_rule("/emu/slot3", "/emu/slot5");
        assert_eq!(m.rewrite_prefix("/emu/slot3/run.log"), "/emu/slot5/run.log");
        assert_eq!(m.rewrite_prefix("/emu/slot30/run.log"), "/emu/slot30/run.log");
        assert_eq!(m.rewrite_prefix("/tmp/x"), "/tmp/x");
    }

    #[test]
    fn longest_prefix_wins_once() {
        let mut m = PathMap::new();
        m.add_rule("/a", "/b");
        m.add_rule("/a/c", "/a");
        m.add_rule("/b", "/z");
        // only the longest rule applies and its output is not rewritten again
        assert_eq!(m.rewrite_prefix("/a/c/f"), "/a/f");
        assert_eq!(m.rewrite_prefix("/a/d"), "/b/d");
    }

    #[test]
    fn proc_paths_carry_real_tids() {
        let mut t = TranslationTable::new(IdClass::Tid);
        for r in 1..=9 {
            t.register(r + 100).unwrap();
        }
        let mut t2 = TranslationTable::new(IdClass::Tid);
        t2.register(9).unwrap();
        let m = PathMap::new();
        assert_eq!(m.rewrite("/proc/1/maps", Some(&t2)).unwrap(), "/proc/9/maps");
        assert_eq!(m.rewrite("/proc/self/maps", Some(&t2)).unwrap(), "/proc/self/maps");
        assert!(m.rewrite("/proc/5/maps", Some(&t2)).is_err());
        assert_eq!(m.rewrite("/proc/3", Some(&t)).unwrap(), "/proc/103");
    }

    #[test]
    fn env_lookup_rules() {
        let mut e = EnvMap::new();
        e.set("DISPLAY", ":7");
        e.unset("SECRET");
        let real = |k: &str| -> Option<String> { Some(format!("real-{k}")) };
        assert_eq!(e.lookup("DISPLAY", || real("DISPLAY")).as_deref(), Some(":7"));
        assert_eq!(e.lookup("SECRET", || real("SECRET")), None);
        assert_eq!(e.lookup("HOME", || real("HOME")).as_deref(), Some("real-HOME"));
    }

    #[test]
    fn config_parse_and_merge() {
        let mut base = VirtConfig::parse("rewrite /emu/slot3 /emu/slot5\nsetenv DISPLAY :0\n# c\n").unwrap();
        let over = VirtConfig::parse("setenv DISPLAY :7\nunsetenv TMPDIR\nrewrite /emu/slot3 /emu/slot9").unwrap();
        base.merge(&over);
        assert_eq!(base.env.get("DISPLAY"), Some(Some(":7")));
        assert_eq!(base.env.get("TMPDIR"), Some(None));
        assert_eq!(base.paths.rewrite_prefix("/emu/slot3/x"), "/emu/slot9/x");
        let err = VirtConfig::parse("setenv A 1\nbogus x").unwrap_err();
        assert_eq!(err, VirtError::Config { line: 2, msg: "unknown directive `bogus`".into() });
        assert!(VirtConfig::parse("rewrite /only-one").is_err());
    }

    #[test]
    fn setenv_value_keeps_spaces() {
        let c = VirtConfig::parse("setenv GREETING hello big world").unwrap();
        assert_eq!(c.env.get("GREETING"), Some(Some("hello big world")));
    }
}
