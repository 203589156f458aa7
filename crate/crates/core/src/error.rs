use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("branch `{0}` has zero impedance")]
    ZeroImpedance(String),
    #[error("network is not connected: nodes {0:?} cannot reach the infinite bus")]
    NotConnected(Vec<String>),
    #[error("expected exactly one infinite node, found {0}")]
    InfiniteNodeCount(usize),
    #[error("expected exactly one machine, found {0}")]
    MachineCount(usize),
    #[error("invalid machine parameters: {0}")]
    InvalidMachine(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("voltage magnitude at `{0}` must be positive")]
    NonPositiveVoltage(String),
    #[error("algebraic admittance block is singular; islanded nodes: {0:?}")]
    SingularAlgebraicBlock(Vec<String>),
    #[error("topology violation: {0}")]
    Topology(String),
    #[error("branch `{0}` is lossy; the closed-form SMIB expressions need a lossless corridor")]
    LossyCorridor(String),
    #[error("node `{0}` carries a shunt; the closed-form SMIB expressions need a shunt-free corridor")]
    CorridorShunt(String),
    #[error("node ordering violated: `{closer}` must be electrically closer to the machine than `{farther}`")]
    Ordering { closer: String, farther: String },
    #[error("dispatch beyond static limit: requested {requested} pu, maximum {limit} pu")]
    BeyondStaticLimit { requested: f64, limit: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("eigenvalue iteration did not converge for a {0}x{0} matrix")]
    EigenNonConvergence(usize),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("residue undefined for defective/clustered pole at {0}")]
    ClusteredPole(String),
    #[error("required phase compensation {required_deg:.2} deg exceeds one lead-lag section (limit {limit_deg} deg)")]
    PhaseOutOfRange { required_deg: f64, limit_deg: f64 },
    #[error("controller evaluated at its pole s = {0}")]
    AtPole(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("voltage collapse at t = {time}: network has no algebraic solution")]
    VoltageCollapse { time: f64 },
    #[error("insufficient ringdown: {0} peaks found, at least 3 needed")]
    InsufficientRingdown(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    /// Errors caused by the model description rather than by numerics.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Error::UnknownNode(_)
                | Error::DuplicateNode(_)
                | Error::ZeroImpedance(_)
                | Error::NotConnected(_)
                | Error::InfiniteNodeCount(_)
                | Error::MachineCount(_)
                | Error::InvalidMachine(_)
                | Error::InvalidParameter(_)
                | Error::LengthMismatch { .. }
                | Error::NonPositiveVoltage(_)
                | Error::Topology(_)
                | Error::LossyCorridor(_)
                | Error::CorridorShunt(_)
                | Error::Ordering { .. }
                | Error::UnknownChannel(_)
                | Error::Empty(_)
        )
    }
}
