use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use anyhow::{anyhow, Context};
use clap::Args;
use serde_json::{json, Value};

use ckptlab::engine::ImageSource;
use ckptlab::fault::{parse_specs, run_campaign, CampaignConfig, CampaignReport, FaultError, FaultSpec, Record};

use crate::exit::{self, Failure, ResultExt};

#[derive(Args, Clone)]
pub struct Common {
    pub image: PathBuf,
    /// One fault spec per line.
    pub specs: PathBuf,
    #[arg(long)]
    pub run_length: u64,
    /// Output port that asserts when the design detects an error.
    #[arg(long)]
    pub checker: String,
    #[arg(long)]
    pub fast: bool,
}

#[derive(Args)]
pub struct CampaignArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of worker processes.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Directory for `campaign.txt` and `campaign.jsonl`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Exit 0 even when silent data corruption was found.
    #[arg(long)]
    pub allow_sdc: bool,
}

#[derive(Args)]
pub struct WorkerArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub shard: usize,
    #[arg(long)]
    pub of: usize,
}

fn fault_failure(e: FaultError) -> Failure {
    match e {
        FaultError::Restore(_) | FaultError::Worker(_) => Failure::runtime(e.into()),
        _ => Failure::config(e.into()),
    }
}

fn load(c: &Common) -> Result<CampaignConfig, Failure> {
    if !c.image.exists() {
        return Err(Failure::config(anyhow!("{} does not exist", c.image.display())));
    }
    let text = std::fs::read_to_string(&c.specs)
        .with_context(|| format!("reading {}", c.specs.display()))
        .config()?;
    let specs = parse_specs(&text)
        .with_context(|| c.specs.display().to_string())
        .config()?;
    let mut cfg = CampaignConfig::new(ImageSource::Path(c.image.clone()), specs, c.run_length, &c.checker);
    cfg.fast = c.fast;
    Ok(cfg)
}

fn shard(specs: &[FaultSpec], k: usize, of: usize) -> Vec<(usize, FaultSpec)> {
    specs.iter().cloned().enumerate().skip(k).step_by(of.max(1)).collect()
}

/// Runs one shard and prints `{"index", "record"}` lines, then an `error`
/// line if the shard stopped early.
pub fn worker(a: WorkerArgs) -> Result<u8, Failure> {
    let mut cfg = load(&a.common)?;
    let mine = shard(&cfg.specs, a.shard, a.of);
    cfg.specs = mine.iter().map(|(_, s)| s.clone()).collect();
    let report = run_campaign(&cfg).map_err(fault_failure)?;
    for ((i, _), r) in mine.iter().zip(&report.results) {
        println!("{}", json!({ "index": i, "record": Record::from(r) }));
    }
    if let Some(e) = &report.error {
        println!("{}", json!({ "error": e }));
    }
    Ok(exit::OK)
}

fn spawn_shards(a: &CampaignArgs, n_specs: usize) -> Result<(Vec<Option<Record>>, Option<String>), Failure> {
    let exe = std::env::current_exe().context("locating own executable").runtime()?;
    let workers = a.parallel.min(n_specs).max(1);
    let mut children = Vec::new();
    for k in 0..workers {
        let c = &a.common;
        let mut cmd = Command::new(&exe);
        cmd.arg("campaign-worker")
            .arg(&c.image)
            .arg(&c.specs)
            .args(["--run-length", &c.run_length.to_string()])
            .args(["--checker", &c.checker])
            .args(["--shard", &k.to_string(), "--of", &workers.to_string()])
            .stdout(Stdio::piped());
        if c.fast {
            cmd.arg("--fast");
        }
        children.push(cmd.spawn().context("spawning campaign worker").runtime()?);
    }

    let mut records: Vec<Option<Record>> = vec![None; n_specs];
    let mut error = None;
    for mut child in children {
        let out = child.stdout.take().expect("stdout is piped");
        for line in BufReader::new(out).lines() {
            let line = line.context("reading campaign worker").runtime()?;
            let v: Value = serde_json::from_str(&line)
                .with_context(|| format!("campaign worker sent `{line}`"))
                .runtime()?;
            if let Some(e) = v.get("error").and_then(Value::as_str) {
                error.get_or_insert_with(|| e.to_string());
                continue;
            }
            let i = v["index"].as_u64().filter(|&i| (i as usize) < n_specs);
            let rec: Record = serde_json::from_value(v["record"].clone()).context("bad record").runtime()?;
            match i {
                Some(i) => records[i as usize] = Some(rec),
                None => return Err(Failure::runtime(anyhow!("campaign worker sent index out of range"))),
            }
        }
        let status = child.wait().context("waiting for campaign worker").runtime()?;
        if !status.success() {
            let code = status.code().unwrap_or(2);
            let f = anyhow!("campaign worker exited with status {code}");
            return Err(if code == 1 { Failure::config(f) } else { Failure::runtime(f) });
        }
    }
    Ok((records, error))
}

fn merge(header: CampaignReport, specs: &[FaultSpec], records: Vec<Option<Record>>, error: Option<String>) -> Result<CampaignReport, Failure> {
    let mut report = CampaignReport { error, ..header };
    for (i, r) in records.into_iter().enumerate() {
        match r {
            Some(r) => report.results.push(r.to_result().map_err(|e| Failure::runtime(anyhow!(e)))?),
            None => {
                report.error.get_or_insert_with(|| FaultError::Worker(format!("experiment `{}` did not run", specs[i])).to_string());
                break;
            }
        }
    }
    Ok(report)
}

fn write_reports(dir: &Path, report: &CampaignReport) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;
    for (name, body) in [("campaign.txt", report.table()), ("campaign.jsonl", report.records())] {
        let path = dir.join(name);
        std::fs::write(&path, body)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    Ok(())
}

pub fn run(a: CampaignArgs) -> Result<u8, Failure> {
    if a.parallel == 0 {
        return Err(Failure::config(anyhow!("--parallel must be at least 1")));
    }
    let cfg = load(&a.common)?;
    let report = if a.parallel == 1 || cfg.specs.len() <= 1 {
        run_campaign(&cfg).map_err(fault_failure)?
    } else {
        let header = run_campaign(&CampaignConfig { specs: Vec::new(), ..cfg.clone() }).map_err(fault_failure)?;
        let (records, error) = spawn_shards(&a, cfg.specs.len())?;
        merge(header, &cfg.specs, records, error)?
    };
    write_reports(&a.out, &report)?;
    print!("{}", report.table());
    if let Some(e) = &report.error {
        return Err(Failure::runtime(anyhow!("campaign incomplete: {e}")));
    }
    if report.has_sdc() && !a.allow_sdc {
        return Ok(exit::SDC);
    }
    Ok(exit::OK)
}
