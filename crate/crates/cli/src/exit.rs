pub const OK: u8 = 0;
pub const CONFIG: u8 = 1;
pub const RUNTIME: u8 = 2;
pub const SDC: u8 = 3;

/// An error paired with the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: anyhow::Error) -> Self {
        Self { code: CONFIG, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: RUNTIME, error }
    }
}

pub trait ResultExt<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::config(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::runtime(e.into()))
    }
}
