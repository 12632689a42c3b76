use std::fmt;
use std::str::FromStr;

/// One workload action, run by the main task at a cycle boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Spawn(String),
    Kill(String, i32),
    Lock(u64, String),
    Unlock(u64, String),
    Open(String),
    Getenv(String),
    Connect(String, String),
    Send(String, String),
    Recv(String, usize),
    Disable,
    Enable,
    Checkpoint,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Spawn(n) => write!(f, "spawn {n}"),
            Action::Kill(n, s) => write!(f, "kill {n} {s}"),
            Action::Lock(l, n) => write!(f, "lock {l} {n}"),
            Action::Unlock(l, n) => write!(f, "unlock {l} {n}"),
            Action::Open(p) => write!(f, "open {p}"),
            Action::Getenv(k) => write!(f, "getenv {k}"),
            Action::Connect(l, p) => write!(f, "connect {l} {p}"),
            Action::Send(l, d) => write!(f, "send {l} {d}"),
            Action::Recv(l, m) => write!(f, "recv {l} {m}"),
            Action::Disable => f.write_str("disable"),
            Action::Enable => f.write_str("enable"),
            Action::Checkpoint => f.write_str("checkpoint"),
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut words = s.split_whitespace();
        let verb = words.next().ok_or("empty action")?;
        let rest: Vec<&str> = words.collect();
        fn num<T: std::str::FromStr>(w: &str, what: &str) -> Result<T, String> {
            w.parse().map_err(|_| format!("bad {what} `{w}`"))
        }
        let want = |n: usize| {
            if rest.len() == n {
                Ok(())
            } else {
                Err(format!("`{verb}` takes {n} argument(s), got {}", rest.len()))
            }
        };
        Ok(match verb {
            "spawn" => {
                want(1)?;
                Action::Spawn(rest[0].into())
            }
            "kill" => {
                want(2)?;
                Action::Kill(rest[0].into(), num(rest[1], "signal")?)
            }
            "lock" => {
                want(2)?;
                Action::Lock(num(rest[0], "lock id")?, rest[1].into())
            }
            "unlock" => {
                want(2)?;
                Action::Unlock(num(rest[0], "lock id")?, rest[1].into())
            }
            "open" => {
                want(1)?;
                Action::Open(rest[0].into())
            }
            "getenv" => {
                want(1)?;
                Action::Getenv(rest[0].into())
            }
            "connect" => {
                want(2)?;
                Action::Connect(rest[0].into(), rest[1].into())
            }
            "send" => {
                if rest.len() < 2 {
                    return Err("`send` takes a label and data".into());
                }
                Action::Send(rest[0].into(), rest[1..].join(" "))
            }
            "recv" => {
                want(2)?;
                Action::Recv(rest[0].into(), num(rest[1], "size")?)
            }
            "disable" => {
                want(0)?;
                Action::Disable
            }
            "enable" => {
                want(0)?;
                Action::Enable
            }
            "checkpoint" => {
                want(0)?;
                Action::Checkpoint
            }
            other => return Err(format!("unknown action `{other}`")),
        })
    }
}

/// Actions keyed by the cycle boundary they run at, in file order within a
/// cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    steps: Vec<(u64, Action)>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, cycle: u64, action: Action) {
        let at = self.steps.partition_point(|(c, _)| *c <= cycle);
        self.steps.insert(at, (cycle, action));
    }

    pub fn steps(&self) -> &[(u64, Action)] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Parses `at CYCLE ACTION` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut s = Script::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (cycle, action) = parse_at(line).map_err(|m| (i + 1, m))?;
            s.push(cycle, action);
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        self.steps
            .iter()
            .map(|(c, a)| format!("at {c} {a}\n"))
            .collect()
    }
}

/// `at CYCLE ACTION...`
pub fn parse_at(line: &str) -> Result<(u64, Action), String> {
    let rest = line.strip_prefix("at ").ok_or("expected `at CYCLE ACTION`")?;
    let (cycle, action) = rest.trim().split_once(char::is_whitespace).ok_or("missing action")?;
    let cycle = cycle.parse().map_err(|_| format!("bad cycle `{cycle}`"))?;
    Ok((cycle, action.trim().parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "at 3 spawn w1\nat 1 lock 7 main\n# note\nat 3 send bus hello world\nat 9 checkpoint\n";
        let s = Script::parse(text).unwrap();
        assert_eq!(s.steps()[0], (1, Action::Lock(7, "main".into())));
        assert_eq!(s.steps()[2].1, Action::Send("bus".into(), "hello world".into()));
        assert_eq!(Script::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(Script::parse("at 1 enable\nat x enable").unwrap_err().0, 2);
        assert!(Script::parse("at 1 fly").is_err());
        assert!(Script::parse("at 1 kill w").is_err());
    }
}
