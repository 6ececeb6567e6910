//! Failure classes and their exit codes.

use std::path::Path;
use std::process::ExitCode;

use celltwin::calib::CalibError;
use celltwin::dagmm::DagmmError;
use celltwin::dataio::DataError;
use celltwin::degrade::DegradeError;
use celltwin::pinn::PinnError;
use celltwin::protocol::ProtocolError;
use celltwin::report::ReportError;
use celltwin::sim::SimError;

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, missing or malformed files.
    Input(String),
    /// Solver breakdown, divergence or other numerical failure.
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Input(_) => ExitCode::from(2),
            Failure::Numeric(_) => ExitCode::from(3),
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Numeric(m) => m,
        }
    }

    pub fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
        move |e| Failure::Input(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidTable(_)
            | SimError::InvalidParameter { .. }
            | SimError::UnknownParameter(_)
            | SimError::Config(_) => Failure::Input(e.to_string()),
            SimError::Domain { .. } | SimError::Saturation { .. } | SimError::Numerical(_) => {
                Failure::Numeric(e.to_string())
            }
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Sim(s) => s.into(),
            ProtocolError::CvRegulation { .. } => Failure::Numeric(e.to_string()),
            ProtocolError::InvalidStep(_) | ProtocolError::InvalidSchedule(_) | ProtocolError::Io(_) => {
                Failure::Input(e.to_string())
            }
        }
    }
}

impl From<DegradeError> for Failure {
    fn from(e: DegradeError) -> Self {
        let text = e.to_string();
        let class = |f: Failure| match f {
            Failure::Input(_) => Failure::Input(text.clone()),
            Failure::Numeric(_) => Failure::Numeric(text.clone()),
        };
        match e {
            DegradeError::InvalidParameter { .. } | DegradeError::Config(_) | DegradeError::Io { .. } => {
                Failure::Input(text)
            }
            DegradeError::EndOfLife { .. } => Failure::Numeric(text),
            DegradeError::Cell { source, .. } => class((*source).into()),
            DegradeError::Protocol(p) => class(p.into()),
            DegradeError::Sim(s) => class(s.into()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Fleet(d) => d.into(),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Space(_) | CalibError::Reference(_) | CalibError::Budget { .. } => {
                Failure::Input(e.to_string())
            }
            CalibError::Gp(_) | CalibError::AllFailed(_) => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<PinnError> for Failure {
    fn from(e: PinnError) -> Self {
        match e {
            PinnError::Diverged { .. } | PinnError::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<DagmmError> for Failure {
    fn from(e: DagmmError) -> Self {
        match e {
            DagmmError::Diverged { .. } | DagmmError::NonFinite(_) | DagmmError::NotPositiveDefinite(_) => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Pinn(p) => p.into(),
            ReportError::Dagmm(d) => d.into(),
            other => Failure::Input(other.to_string()),
        }
    }
}
