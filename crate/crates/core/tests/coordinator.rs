mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ckptlab::coordinator::{global_checkpoint, global_restart, query_status, Coordinator, WorkerLink};
use ckptlab::engine::ImageSource;
use ckptlab::process::{LaunchSpec, Process, RestoreOptions};
use ckptlab::workloads::{counter_stimulus, COUNTER_PARITY};
use common::{options, virt_plugins};

fn start_workers(
    addr: &str,
    n: usize,
    dir: &std::path::Path,
    stop: &Arc<AtomicBool>,
) -> Vec<std::thread::JoinHandle<Process>> {
    (0..n)
        .map(|_| {
            let addr = addr.to_string();
            let dir = dir.to_path_buf();
            let stop = stop.clone();
            std::thread::spawn(move || {
                let mut link = WorkerLink::connect(&addr, 0, 0).unwrap();
                let mut spec = LaunchSpec::new(COUNTER_PARITY, counter_stimulus(10_000));
                spec.options = options(&dir);
                spec.options.ckpt_name = "w%w-%04d.img".into();
                spec.options.worker_id = link.worker_id();
                let mut p = Process::launch(spec, virt_plugins()).unwrap();
                p.serve(10_000, &mut link, &stop, Duration::from_micros(200)).unwrap();
                p
            })
        })
        .collect()
}

fn wait_for_workers(addr: &str, n: usize) {
    for _ in 0..500 {
        if query_status(addr).unwrap().len() == n {
            return;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    panic!("workers never registered");
}

#[test]
fn global_checkpoint_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut coord = Coordinator::serve("127.0.0.1:0").unwrap();
    let addr = coord.addr().to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let workers = start_workers(&addr, 3, dir.path(), &stop);
    wait_for_workers(&addr, 3);

    let done = global_checkpoint(&addr, Duration::from_secs(20)).unwrap();
    assert_eq!(done.iter().map(|d| d.0).collect::<Vec<_>>(), [1, 2, 3]);
    stop.store(true, Ordering::SeqCst);
    let procs: Vec<Process> = workers.into_iter().map(|h| h.join().unwrap()).collect();
    for p in &procs {
        assert!(p.failures().is_empty(), "{:?}", p.failures());
        assert_eq!(p.checkpoints().len(), 1);
        assert_eq!(p.workload().world, 3);
    }
    drop(procs);
    wait_for_workers(&addr, 0);

    let images: Vec<ImageSource> = done.iter().map(|(_, p)| ImageSource::Path(p.into())).collect();
    let restarted = global_restart(&addr, &images, |_| RestoreOptions {
        options: options(dir.path()),
        ..RestoreOptions::default()
    });
    let ids: Vec<u64> = restarted
        .into_iter()
        .map(|r| r.unwrap().process.worker_id())
        .collect();
    assert_eq!(ids, [1, 2, 3]);
    coord.shutdown();
}

#[test]
fn checkpoint_with_no_workers_is_an_error() {
    let coord = Coordinator::serve("127.0.0.1:0").unwrap();
    let addr = coord.addr().to_string();
    assert!(global_checkpoint(&addr, Duration::from_secs(5)).is_err());
}
