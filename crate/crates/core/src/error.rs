use std::fmt;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("simulation failed on path {path} at node {node}: {reason}")]
    Simulation {
        path: usize,
        node: usize,
        reason: String,
    },

    #[error("market price of risk undefined: volatility {0} is not positive")]
    Singularity(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cash flow evaluation failed at t={time} ({kind}): {reason}")]
    Cashflow {
        time: f64,
        kind: PaymentKind,
        reason: String,
    },

    #[error("estimation failed (seed {seed}, sample {index}): {reason}")]
    Estimation {
        seed: u64,
        index: usize,
        reason: String,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

/// Component of the payment stream an amount belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaymentKind {
    Jump,
    Sojourn,
    Transition,
}

impl fmt::Display for PaymentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaymentKind::Jump => "jump",
            PaymentKind::Sojourn => "sojourn",
            PaymentKind::Transition => "transition",
        })
    }
}
