use redistill::harness::HarnessError;
use redistill::kernel::KernelError;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: USAGE, error: anyhow::anyhow!(msg.into()) }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self { code: DATA, error: error.into() }
    }

    pub fn numeric(error: impl Into<anyhow::Error>) -> Self {
        Self { code: NUMERIC, error: error.into() }
    }

    pub fn context(mut self, ctx: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(ctx);
        self
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::DivergenceDetected { .. } | HarnessError::Kernel(KernelError::NonFinite(_)) => Failure::numeric(e),
            HarnessError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::data(e),
        }
    }
}
