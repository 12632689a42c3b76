use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FileRule {
    SaveContent,
    #[default]
    SavePathOnly,
    Ignore,
}

impl FromStr for FileRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "save-content" => Ok(FileRule::SaveContent),
            "save-path-only" => Ok(FileRule::SavePathOnly),
            "ignore" => Ok(FileRule::Ignore),
            other => Err(format!("unknown file rule `{other}`")),
        }
    }
}

impl fmt::Display for FileRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FileRule::SaveContent => "save-content",
            FileRule::SavePathOnly => "save-path-only",
            FileRule::Ignore => "ignore",
        })
    }
}

/// Per-path checkpoint rules, longest prefix first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilePolicy {
    rules: Vec<(String, FileRule)>,
}

impl FilePolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, prefix: &str, rule: FileRule) {
        self.rules.retain(|(p, _)| p != prefix);
        self.rules.push((prefix.to_string(), rule));
    }

    pub fn rules(&self) -> &[(String, FileRule)] {
        &self.rules
    }

    pub fn rule_for(&self, path: &str) -> FileRule {
        self.rules
            .iter()
            .filter(|(p, _)| {
                path.strip_prefix(p.as_str())
                    .is_some_and(|rest| rest.is_empty() || rest.starts_with('/') || p.ends_with('/'))
            })
            .max_by_key(|(p, _)| p.len())
            .map(|(_, r)| *r)
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_longest_prefix() {
        let mut p = FilePolicy::new();
        assert_eq!(p.rule_for("/any"), FileRule::SavePathOnly);
        p.add("/emu", FileRule::SaveContent);
        p.add("/emu/tmp", FileRule::Ignore);
        assert_eq!(p.rule_for("/emu/run.log"), FileRule::SaveContent);
        assert_eq!(p.rule_for("/emu/tmp/x"), FileRule::Ignore);
        assert_eq!(p.rule_for("/emulator"), FileRule::SavePathOnly);
        assert_eq!("ignore".parse::<FileRule>(), Ok(FileRule::Ignore));
        assert!("keep".parse::<FileRule>().is_err());
    }
}
