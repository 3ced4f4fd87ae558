use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("discretization needs at least one point per disk")]
    ZeroGamma,
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("non-numeric field {field:?} at line {line}")]
    NonNumeric { line: usize, field: String },
    #[error("radius < 0 at line {line}")]
    NegativeRadius { line: usize },
    #[error("missing depot line")]
    MissingDepot,
    #[error("depot radius must be 0 (line {line})")]
    DepotRadius { line: usize },
    #[error("expected {expected} columns at line {line}, found {found}")]
    ColumnCount { line: usize, expected: usize, found: usize },
    #[error("header declares {declared} targets but {found} target lines follow")]
    CountMismatch { declared: usize, found: usize },
    #[error("instance has no targets")]
    Empty,
    #[error("all points coincide; cannot normalize a zero-extent instance")]
    ZeroExtent,
    #[error("point ({x}, {y}) lies outside the unit square")]
    OutsideUnitSquare { x: f64, y: f64 },
    #[error("non-finite coordinate at line {line}")]
    NonFinite { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("requested {requested} starts but the instance has {available} targets")]
    TooManyStarts { requested: usize, available: usize },
    #[error("n_starts must be at least 1")]
    NoStarts,
    #[error("node {0} is not feasible in the current state")]
    Infeasible(usize),
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("waypoint index {index} out of range for gamma = {gamma}")]
    WaypointOutOfRange { index: usize, gamma: usize },
    #[error("state is already terminal")]
    Done,
    #[error("state is not terminal yet")]
    NotDone,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("row {0} has every entry masked")]
    AllMasked(usize),
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("the depot has no waypoint choice")]
    DepotLocation,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shared baseline needs at least two trajectories, got {0}")]
    DegenerateBaseline(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty evaluation dataset")]
    EmptyDataset,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum HeuristicError {
    #[error("brute force is limited to n <= {max_n} and gamma <= {max_gamma} (got n = {n}, gamma = {gamma})")]
    TooLarge { n: usize, gamma: usize, max_n: usize, max_gamma: usize },
    #[error("target {0} is already part of the route")]
    DuplicateTarget(usize),
    #[error("target {0} does not exist in the instance")]
    UnknownTarget(usize),
    #[error("frozen prefix {frozen} exceeds route length {len}")]
    FrozenPrefix { frozen: usize, len: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Error)]
pub enum DynamicError {
    #[error("malformed scenario: {0}")]
    Schedule(String),
    #[error("policy planner requested without a trained model")]
    MissingPolicy,
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Env(#[from] EnvError),
}
