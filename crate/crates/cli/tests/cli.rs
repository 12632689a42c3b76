use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use ckptlab::engine::ImageReader;
use ckptlab::workloads::{counter_stimulus, COUNTER_PARITY, COUNTER_REGISTERS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ckptlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes the counter design, a long stimulus and a config whose extra
/// lines are `extra`; returns the config path.
fn counter_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    std::fs::write(dir.join("counter.net"), COUNTER_PARITY).unwrap();
    std::fs::write(dir.join("counter.stim"), counter_stimulus(100_000).to_text()).unwrap();
    let path = dir.join(name);
    std::fs::write(
        &path,
        format!("netlist counter.net\nstimulus counter.stim\nplugin tid-virt rank 10\nplugin env-virt rank 40\n{extra}"),
    )
    .unwrap();
    path
}

fn image_cycle(path: &Path) -> u64 {
    ImageReader::new(std::fs::File::open(path).unwrap()).unwrap().header().cycle
}

/// Second whitespace-separated field of each `checkpoint CYCLE PATH` line.
fn checkpoint_paths(out: &str) -> Vec<PathBuf> {
    out.lines()
        .filter_map(|l| l.strip_prefix("checkpoint "))
        .map(|l| PathBuf::from(l.split_once(' ').unwrap().1))
        .collect()
}

#[test]
fn launch_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = counter_config(dir.path(), "run.cfg", "run 40\n");
    let trace = dir.path().join("trace.txt");
    let o = run(&["launch", cfg.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(std::fs::read_to_string(trace).unwrap().lines().count(), 40);
}

#[test]
fn config_errors_exit_one_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = counter_config(dir.path(), "bad.cfg", "plugin warp-drive rank 3\n");
    let o = run(&["launch", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 5"), "{o:?}");
    assert_eq!(code(&run(&["launch"])), 1);
    assert_eq!(code(&run(&["license-serve", "--capacity", "0"])), 1);
}

#[test]
fn unreachable_coordinator_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = counter_config(dir.path(), "c.cfg", &format!("coordinator 127.0.0.1:{port}\nrun 5\n"));
    assert_eq!(code(&run(&["launch", cfg.to_str().unwrap()])), 2);
}

#[test]
fn checkpoint_at_cycle_then_restart_with_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = counter_config(dir.path(), "c.cfg", "env DISPLAY :0\nat 60 getenv DISPLAY\n");
    let o = run(&["ckpt", cfg.to_str().unwrap(), "--at-cycle", "50"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let images = checkpoint_paths(&stdout(&o));
    assert_eq!(images.len(), 1);
    assert_eq!(image_cycle(&images[0]), 50);

    let img = images[0].to_str().unwrap();
    let o = run(&["restart", img, "--run", "20", "--setenv", "DISPLAY=:7"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).lines().any(|l| l == "60: getenv DISPLAY => :7"), "{}", stdout(&o));

    let o = run(&["restart", img, "--run", "20", "--at-cycle", "10"]);
    assert_eq!(code(&o), 1, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("already passed"));

    let o = run(&["inspect", img]);
    assert!(stdout(&o).contains("cycle 50"));
}

fn campaign(image: &str, specs: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "campaign",
        image,
        specs.to_str().unwrap(),
        "--run-length",
        "16",
        "--checker",
        "err",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn parallel_campaign_report_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = counter_config(dir.path(), "c.cfg", "");
    let o = run(&["ckpt", cfg.to_str().unwrap(), "--at-cycle", "5"]);
    let image = checkpoint_paths(&stdout(&o)).remove(0);
    let image = image.to_str().unwrap();

    let specs = dir.path().join("flips.txt");
    let mut text = String::new();
    for r in COUNTER_REGISTERS {
        text += &format!("flip {r}\n");
        for c in [6, 9] {
            text += &format!("flip {r} at {c}\n");
        }
    }
    std::fs::write(&specs, text).unwrap();

    let serial = campaign(image, &specs, &dir.path().join("serial"), &[]);
    let parallel = campaign(image, &specs, &dir.path().join("parallel"), &["--parallel", "4"]);
    assert_eq!(code(&serial), 3, "{serial:?}");
    assert_eq!(code(&parallel), 3, "{parallel:?}");
    for f in ["campaign.txt", "campaign.jsonl"] {
        let a = std::fs::read_to_string(dir.path().join("serial").join(f)).unwrap();
        let b = std::fs::read_to_string(dir.path().join("parallel").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let jsonl = std::fs::read_to_string(dir.path().join("serial/campaign.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 18);

    let allowed = campaign(image, &specs, &dir.path().join("allowed"), &["--allow-sdc", "--parallel", "2"]);
    assert_eq!(code(&allowed), 0);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = campaign(image, &empty, &dir.path().join("empty"), &["--parallel", "4"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(std::fs::read_to_string(dir.path().join("empty/campaign.jsonl")).unwrap(), "");

    std::fs::write(&empty, "flip nosuch\n").unwrap();
    assert_eq!(code(&campaign(image, &empty, &dir.path().join("bad"), &[])), 1);
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn status_lines(addr: &str) -> Vec<String> {
    stdout(&run(&["coordinator", "--status", addr])).lines().map(str::to_string).collect()
}

#[test]
fn coordinated_checkpoint_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut coord = Killed(
        bin()
            .args(["coordinator", "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut first = String::new();
    BufReader::new(coord.0.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().rsplit(' ').next().unwrap().to_string();

    let cfg = counter_config(
        dir.path(),
        "w.cfg",
        &format!("coordinator {addr}\nckpt-name w%w-%04d.img\nrun 100000\n"),
    );
    let workers: Vec<Killed> = (0..2)
        .map(|_| {
            Killed(
                bin()
                    .args(["launch", cfg.to_str().unwrap(), "--serve", "--pace-us", "200", "--quiet"])
                    .spawn()
                    .unwrap(),
            )
        })
        .collect();
    for _ in 0..500 {
        if status_lines(&addr).len() == 2 {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(status_lines(&addr), ["worker 1 running", "worker 2 running"]);

    let o = run(&["ckpt", "--coordinator", &addr]);
    assert_eq!(code(&o), 0, "{o:?}");
    let images: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.rsplit(' ').next().unwrap().to_string())
        .collect();
    assert_eq!(images.len(), 2);
    drop(workers);
    for _ in 0..500 {
        if status_lines(&addr).is_empty() {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }

    let mut args = vec!["restart", "--coordinator", &addr, "--run", "10"];
    args.extend(images.iter().map(String::as_str));
    let o = run(&args);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("worker ")).count(), 2);
}

#[test]
fn interval_mode_takes_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = counter_config(dir.path(), "i.cfg", "ckpt-dir images\nrun 300\n");
    let o = run(&["launch", cfg.to_str().unwrap(), "--interval-ms", "40", "--pace-us", "1000"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let images = checkpoint_paths(&stdout(&o));
    assert!(images.len() >= 2, "{}", stdout(&o));
    let cycles: Vec<u64> = images.iter().map(|p| image_cycle(p)).collect();
    assert!(cycles.windows(2).all(|w| w[0] < w[1]), "{cycles:?}");
}
