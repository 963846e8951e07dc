use thiserror::Error;

use crate::{allocate::AllocError, htsr::HtsrError, io::IoError, schedule::ScheduleError};
use crate::{spectral::SpectralError, train::TrainError};

/// Crate-wide error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Htsr(#[from] HtsrError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status: 2 for invalid configuration, 3 for bad input data,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        const USAGE: i32 = 2;
        const DATA: i32 = 3;
        const NUMERIC: i32 = 4;
        match self {
            Error::Spectral(_) => DATA,
            Error::Htsr(_) => NUMERIC,
            Error::Alloc(AllocError::InvalidConfig(_)) | Error::Schedule(ScheduleError::InvalidConfig(_)) => USAGE,
            Error::Schedule(ScheduleError::Alloc(AllocError::InvalidConfig(_))) => USAGE,
            Error::Alloc(_) | Error::Schedule(_) => NUMERIC,
            Error::Train(e) => match e {
                TrainError::InvalidConfig(_)
                | TrainError::Schedule(ScheduleError::InvalidConfig(_))
                | TrainError::Alloc(AllocError::InvalidConfig(_)) => USAGE,
                TrainError::InvalidBatch(_)
                | TrainError::TokenOutOfRange { .. }
                | TrainError::SequenceTooLong { .. }
                | TrainError::ShapeMismatch(_) => DATA,
                TrainError::DivergedLoss { .. } | TrainError::Schedule(_) | TrainError::Alloc(_) => NUMERIC,
            },
            Error::Io(IoError::AllLayersFailed(_)) => NUMERIC,
            Error::Io(_) => DATA,
        }
    }
}
