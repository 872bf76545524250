use std::fmt;
use std::str::FromStr;

/// Error names as they appear after `ERR` on the wire. Every depot and
/// transform error maps onto exactly one code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    MalformedFrame,
    SizeLimitExceeded,
    AdmissionDenied,
    NoSuchAllocation,
    BadCapability,
    Expired,
    OutOfRange,
    ResourceExhausted,
    InvalidArgument,
    StoreFault,
    NotLocal,
    UnknownOperation,
    DuplicateName,
    RemoteUnreachable,
    StaleOp,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 15] = [
        ErrorCode::MalformedFrame,
        ErrorCode::SizeLimitExceeded,
        ErrorCode::AdmissionDenied,
        ErrorCode::NoSuchAllocation,
        ErrorCode::BadCapability,
        ErrorCode::Expired,
        ErrorCode::OutOfRange,
        ErrorCode::ResourceExhausted,
        ErrorCode::InvalidArgument,
        ErrorCode::StoreFault,
        ErrorCode::NotLocal,
        ErrorCode::UnknownOperation,
        ErrorCode::DuplicateName,
        ErrorCode::RemoteUnreachable,
        ErrorCode::StaleOp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::MalformedFrame => "MalformedFrame",
            ErrorCode::SizeLimitExceeded => "SizeLimitExceeded",
            ErrorCode::AdmissionDenied => "AdmissionDenied",
            ErrorCode::NoSuchAllocation => "NoSuchAllocation",
            ErrorCode::BadCapability => "BadCapability",
            ErrorCode::Expired => "Expired",
            ErrorCode::OutOfRange => "OutOfRange",
            ErrorCode::ResourceExhausted => "ResourceExhausted",
            ErrorCode::InvalidArgument => "InvalidArgument",
            ErrorCode::StoreFault => "StoreFault",
            ErrorCode::NotLocal => "NotLocal",
            ErrorCode::UnknownOperation => "UnknownOperation",
            ErrorCode::DuplicateName => "DuplicateName",
            ErrorCode::RemoteUnreachable => "RemoteUnreachable",
            ErrorCode::StaleOp => "StaleOp",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        ErrorCode::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or(())
    }
}

/// Failures of depot buffer operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DepotError {
    #[error("capacity {requested} exceeds the depot limit of {limit} bytes")]
    SizeLimitExceeded { requested: u64, limit: u64 },
    #[error("admission denied: {0}")]
    AdmissionDenied(String),
    #[error("no such allocation {0}")]
    NoSuchAllocation(u64),
    #[error("capability rejected")]
    BadCapability,
    #[error("allocation {0} has expired")]
    Expired(u64),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("resource exhausted: need {needed} bytes, at most {available} obtainable")]
    ResourceExhausted { needed: u64, available: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("store interrupted: {0}")]
    StoreFault(String),
    #[error("capability names another depot ({0})")]
    NotLocal(String),
}

impl DepotError {
    pub fn code(&self) -> ErrorCode {
        match self {
            DepotError::SizeLimitExceeded { .. } => ErrorCode::SizeLimitExceeded,
            DepotError::AdmissionDenied(_) => ErrorCode::AdmissionDenied,
            DepotError::NoSuchAllocation(_) => ErrorCode::NoSuchAllocation,
            DepotError::BadCapability => ErrorCode::BadCapability,
            DepotError::Expired(_) => ErrorCode::Expired,
            DepotError::OutOfRange(_) => ErrorCode::OutOfRange,
            DepotError::ResourceExhausted { .. } => ErrorCode::ResourceExhausted,
            DepotError::InvalidArgument(_) => ErrorCode::InvalidArgument,
            DepotError::StoreFault(_) => ErrorCode::StoreFault,
            DepotError::NotLocal(_) => ErrorCode::NotLocal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_names_round_trip() {
        for code in ErrorCode::ALL {
            assert_eq!(code.as_str().parse::<ErrorCode>(), Ok(code));
            assert!(!code.as_str().contains(' '));
        }
        assert!("Nope".parse::<ErrorCode>().is_err());
    }
}
