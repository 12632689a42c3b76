//! Launch configuration files and the plugin registry.
//!
//! ```text
//! netlist counter.net
//! stimulus counter.stim            # or: stimulus lfsr TAPS SEED LEN
//! plugin tid-virt rank 10
//! plugin lock-patch rank 20
//! coordinator 127.0.0.1:7070
//! virt paths.virt
//! file save-content /tmp/emu
//! env HOME /home/sim
//! ckpt-dir images
//! ckpt-name ckpt-%04d.img
//! at 5 spawn worker
//! run 100
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file, and referenced files must exist when the config is parsed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::emulator::{Netlist, Stimulus};
use crate::engine::{FilePolicy, FileRule};
use crate::fault::{FaultInjector, FaultSpec};
use crate::license::LicensePlugin;
use crate::plugin::{ConnVirt, EnvVirt, LockPatch, PathVirt, Plugin, PluginSet, SharedLink, TidVirt};
use crate::process::{parse_at, LaunchSpec, ProcessOptions, Script, DEFAULT_CKPT_NAME};
use crate::virt::VirtConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("{0}")]
    Missing(String),
}

fn at_line(line: usize) -> impl Fn(String) -> ConfigError {
    move |msg| ConfigError::Line { line, msg }
}

/// Names accepted on `plugin` lines.
pub const PLUGIN_NAMES: [&str; 8] = [
    TidVirt::NAME,
    ConnVirt::NAME,
    PathVirt::NAME,
    EnvVirt::NAME,
    LockPatch::NAME,
    FaultInjector::NAME,
    LicensePlugin::NAME,
    SharedLink::NAME,
];

/// Builds one plugin from `plugin NAME rank R [key=value...]`.
pub fn build_plugin(line: &str) -> Result<Arc<dyn Plugin>, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let (name, rank, opts) = match words.as_slice() {
        ["plugin", name, "rank", rank, opts @ ..] => (
            *name,
            rank.parse::<u32>().map_err(|_| format!("bad rank `{rank}`"))?,
            opts,
        ),
        _ => return Err("expected `plugin NAME rank R [key=value...]`".into()),
    };
    let mut kv: Vec<(&str, &str)> = Vec::new();
    for o in opts {
        kv.push(o.split_once('=').ok_or_else(|| format!("option `{o}` is not key=value"))?);
    }
    let get = |k: &str| kv.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
    let allow = |keys: &[&str]| match kv.iter().find(|(k, _)| !keys.contains(k)) {
        Some((k, _)) => Err(format!("plugin `{name}` has no option `{k}`")),
        None => Ok(()),
    };
    let need = |k: &str| get(k).ok_or_else(|| format!("plugin `{name}` needs `{k}=...`"));
    let plugin: Arc<dyn Plugin> = match name {
        TidVirt::NAME => {
            allow(&[])?;
            Arc::new(TidVirt::new(rank))
        }
        ConnVirt::NAME => {
            allow(&[])?;
            Arc::new(ConnVirt::new(rank))
        }
        PathVirt::NAME => {
            allow(&[])?;
            Arc::new(PathVirt::new(rank))
        }
        EnvVirt::NAME => {
            allow(&[])?;
            Arc::new(EnvVirt::new(rank))
        }
        LockPatch::NAME => {
            allow(&[])?;
            Arc::new(LockPatch::new(rank))
        }
        FaultInjector::NAME => {
            allow(&["spec"])?;
            let specs = kv
                .iter()
                .map(|(_, v)| FaultSpec::from_option(v))
                .collect::<Result<Vec<_>, _>>()?;
            Arc::new(FaultInjector::new(rank, specs))
        }
        LicensePlugin::NAME => {
            allow(&["holder", "server"])?;
            Arc::new(LicensePlugin::new(rank, need("holder")?, need("server")?)?)
        }
        SharedLink::NAME => {
            allow(&["peer", "resource"])?;
            Arc::new(SharedLink::new(
                rank,
                need("peer")?,
                get("resource").unwrap_or(SharedLink::DEFAULT_RESOURCE),
            ))
        }
        other => {
            return Err(format!(
                "unknown plugin `{other}` (known: {})",
                PLUGIN_NAMES.join(", ")
            ))
        }
    };
    Ok(plugin)
}

/// Builds every plugin line; errors carry the 1-based index of the line.
pub fn build_plugins(lines: &[String]) -> Result<Vec<Arc<dyn Plugin>>, ConfigError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| build_plugin(l).map_err(at_line(i + 1)))
        .collect()
}

#[derive(Debug, Clone)]
pub enum StimulusSource {
    File(PathBuf),
    Lfsr { taps: u64, seed: u64, len: usize },
}

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub base_dir: PathBuf,
    pub netlist_path: PathBuf,
    pub netlist_src: String,
    pub stimulus: Stimulus,
    pub stimulus_source: StimulusSource,
    /// `(config line number, plugin line)`.
    pub plugins: Vec<(usize, String)>,
    pub coordinator: Option<String>,
    pub virt: VirtConfig,
    pub files: FilePolicy,
    pub env: BTreeMap<String, String>,
    pub ckpt_dir: PathBuf,
    pub ckpt_name: String,
    pub script: Script,
    pub run: u64,
}

fn parse_num(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

impl LaunchConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_file(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let existing = |p: &str, line: usize| {
            let path = resolve(p);
            if path.exists() {
                Ok(path)
            } else {
                Err(ConfigError::Line {
                    line,
                    msg: format!("{} does not exist", path.display()),
                })
            }
        };

        let mut netlist: Option<(usize, PathBuf)> = None;
        let mut stimulus: Option<(usize, StimulusSource)> = None;
        let mut plugins = Vec::new();
        let mut coordinator = None;
        let mut virt = VirtConfig::default();
        let mut files = FilePolicy::new();
        let mut env = BTreeMap::new();
        let mut ckpt_dir = base_dir.to_path_buf();
        let mut ckpt_name = DEFAULT_CKPT_NAME.to_string();
        let mut script = Script::new();
        let mut run = 0;

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let words: Vec<&str> = rest.split_whitespace().collect();
            let err = at_line(n);
            let one = |what: &str| match words.as_slice() {
                [w] => Ok(*w),
                _ => Err(err(format!("`{key}` takes one {what}"))),
            };
            match key {
                "netlist" => netlist = Some((n, existing(one("path")?, n)?)),
                "stimulus" => {
                    let src = match words.as_slice() {
                        ["lfsr", taps, seed, len] => StimulusSource::Lfsr {
                            taps: parse_num(taps).map_err(&err)?,
                            seed: parse_num(seed).map_err(&err)?,
                            len: parse_num(len).map_err(&err)? as usize,
                        },
                        [p] => StimulusSource::File(existing(p, n)?),
                        _ => return Err(err("expected `stimulus PATH` or `stimulus lfsr TAPS SEED LEN`".into())),
                    };
                    stimulus = Some((n, src));
                }
                "plugin" => {
                    build_plugin(line).map_err(&err)?;
                    plugins.push((n, line.to_string()));
                }
                "coordinator" => coordinator = Some(one("address")?.to_string()),
                "virt" => {
                    let path = existing(one("path")?, n)?;
                    let parsed = VirtConfig::parse(&read_file(&path)?).map_err(|e| ConfigError::File {
                        path: path.display().to_string(),
                        msg: e.to_string(),
                    })?;
                    virt.merge(&parsed);
                }
                "file" => match words.as_slice() {
                    [rule, prefix] => files.add(prefix, rule.parse::<FileRule>().map_err(&err)?),
                    _ => return Err(err("expected `file RULE PREFIX`".into())),
                },
                "env" => match words.as_slice() {
                    [k] => {
                        env.insert(k.to_string(), String::new());
                    }
                    [k, v @ ..] => {
                        env.insert(k.to_string(), v.join(" "));
                    }
                    [] => return Err(err("expected `env KEY VALUE`".into())),
                },
                "ckpt-dir" => ckpt_dir = resolve(one("directory")?),
                "ckpt-name" => ckpt_name = one("pattern")?.to_string(),
                "at" => {
                    let (cycle, action) = parse_at(line).map_err(&err)?;
                    script.push(cycle, action);
                }
                "run" => run = parse_num(one("cycle count")?).map_err(&err)?,
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }

        let (_, netlist_path) = netlist.ok_or_else(|| ConfigError::Missing("no `netlist` line".into()))?;
        let netlist_src = read_file(&netlist_path)?;
        let parsed = Netlist::parse(&netlist_src).map_err(|e| ConfigError::File {
            path: netlist_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let width = parsed.inputs().len();
        let (stim_line, stimulus_source) =
            stimulus.ok_or_else(|| ConfigError::Missing("no `stimulus` line".into()))?;
        let stimulus = match &stimulus_source {
            StimulusSource::File(p) => Stimulus::parse(&read_file(p)?, width).map_err(|e| ConfigError::File {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?,
            StimulusSource::Lfsr { taps, seed, len } => {
                if *seed == 0 {
                    return Err(at_line(stim_line)("lfsr seed must be non-zero".into()));
                }
                Stimulus::lfsr(width, *taps, *seed, *len)
            }
        };
        let built: Vec<Arc<dyn Plugin>> = plugins
            .iter()
            .map(|(n, l)| build_plugin(l).map_err(at_line(*n)))
            .collect::<Result<_, _>>()?;
        if let Err(e) = PluginSet::new(built) {
            let line = plugins.last().map_or(0, |(n, _)| *n);
            return Err(ConfigError::Line {
                line,
                msg: e.to_string(),
            });
        }
        Ok(LaunchConfig {
            base_dir: base_dir.to_path_buf(),
            netlist_path,
            netlist_src,
            stimulus,
            stimulus_source,
            plugins,
            coordinator,
            virt,
            files,
            env,
            ckpt_dir,
            ckpt_name,
            script,
            run,
        })
    }

    pub fn plugin_lines(&self) -> Vec<String> {
        self.plugins.iter().map(|(_, l)| l.clone()).collect()
    }

    pub fn build_plugins(&self) -> Result<Vec<Arc<dyn Plugin>>, ConfigError> {
        self.plugins
            .iter()
            .map(|(n, l)| build_plugin(l).map_err(at_line(*n)))
            .collect()
    }

    pub fn options(&self) -> ProcessOptions {
        ProcessOptions {
            files: self.files.clone(),
            ckpt_dir: self.ckpt_dir.clone(),
            ckpt_name: self.ckpt_name.clone(),
            env: self.env.clone(),
            ..ProcessOptions::default()
        }
    }

    pub fn launch_spec(&self) -> LaunchSpec {
        LaunchSpec {
            netlist_src: self.netlist_src.clone(),
            stimulus: self.stimulus.clone(),
            script: self.script.clone(),
            virt: self.virt.clone(),
            options: self.options(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_every_known_plugin() {
        let lines = [
            "plugin tid-virt rank 10",
            "plugin conn-virt rank 11",
            "plugin path-virt rank 12",
            "plugin env-virt rank 13",
            "plugin lock-patch rank 20",
            "plugin fault-injector rank 50 spec=flip,c0 spec=stuck,s,1,5,7",
            "plugin license rank 60 holder=sim server=127.0.0.1:1",
            "plugin shared-link rank 70 peer=loop:emu",
        ];
        for l in lines {
            let p = build_plugin(l).unwrap();
            assert_eq!(p.spec_line().split_whitespace().next(), Some("plugin"));
            assert_eq!(build_plugin(&p.spec_line()).unwrap().spec_line(), p.spec_line());
        }
        assert!(build_plugin("plugin warp-drive rank 3").err().unwrap().contains("unknown plugin"));
        assert!(build_plugin("plugin tid-virt rank x").is_err());
        assert!(build_plugin("plugin tid-virt rank 3 color=red").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("n.net"), "input a\noutput o a\n").unwrap();
        let good = "netlist n.net\nstimulus lfsr 0x3 1 8\nplugin tid-virt rank 10\nrun 4\n";
        let cfg = LaunchConfig::parse(good, dir.path()).unwrap();
        assert_eq!(cfg.stimulus.len(), 8);
        assert_eq!(cfg.run, 4);
        let bad = "netlist n.net\nstimulus lfsr 0x3 1 8\n\nplugin nope rank 10\n";
        assert!(matches!(LaunchConfig::parse(bad, dir.path()), Err(ConfigError::Line { line: 4, .. })));
        let missing = "netlist gone.net\n";
        assert!(matches!(LaunchConfig::parse(missing, dir.path()), Err(ConfigError::Line { line: 1, .. })));
        let dup = "netlist n.net\nstimulus lfsr 3 1 8\nplugin tid-virt rank 10\nplugin env-virt rank 10\n";
        assert!(matches!(LaunchConfig::parse(dup, dir.path()), Err(ConfigError::Line { line: 4, .. })));
    }
}
