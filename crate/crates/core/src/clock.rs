//! Monotonic and wall-clock stamps. On `wasm32-unknown-unknown` neither clock
//! exists, so both return 0 there.

#[cfg(not(target_arch = "wasm32"))]
mod imp {
    use std::sync::OnceLock;
    use std::time::{Instant, SystemTime, UNIX_EPOCH};

    static EPOCH: OnceLock<Instant> = OnceLock::new();

    pub fn monotonic_nanos() -> u64 {
        EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }

    pub fn wall_nanos() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    }
}

#[cfg(target_arch = "wasm32")]
mod imp {
    pub fn monotonic_nanos() -> u64 {
        0
    }

    pub fn wall_nanos() -> u64 {
        0
    }
}

/// Nanoseconds since the first call in this process.
pub fn monotonic_nanos() -> u64 {
    imp::monotonic_nanos()
}

/// Nanoseconds since the Unix epoch.
pub fn wall_nanos() -> u64 {
    imp::wall_nanos()
}
