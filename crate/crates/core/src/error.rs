use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeoError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeoError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bracket [Y{i}, Y{j}] at {point:?} is not in the span of the family (residual {residual:.3e})")]
    NotInvolutive {
        i: usize,
        j: usize,
        point: Vec<f64>,
        residual: f64,
    },

    #[error("tuple {tuple:?} has vanishing wedge volume ({volume:.3e})")]
    DegenerateTuple { tuple: Vec<usize>, volume: f64 },

    #[error("vector is not in the span of the tuple (residual {residual:.3e})")]
    NotInSpan { residual: f64 },

    #[error("all fields vanish at {point:?}")]
    DegeneratePoint { point: Vec<f64> },

    #[error("trajectory left the domain box at time {time:.6e}")]
    EscapedDomain { time: f64 },

    #[error("integrator failed: {0}")]
    Integrator(String),

    #[error("frame collapsed at h = {h:?}")]
    FrameCollapse { h: Vec<f64> },

    #[error("radial ODE blew up at rho = {rho:.6e}")]
    RadiusTooLarge { rho: f64 },

    #[error("lift diverged at t = {t:.6e} (tracking error {error:.3e})")]
    LiftDiverged { t: f64, error: f64 },

    #[error("map is not injective: h = {a:?} and h = {b:?} collide (distance {distance:.3e})")]
    NotInjective {
        a: Vec<f64>,
        b: Vec<f64>,
        distance: f64,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl GeoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GeoError::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GeoError::DimensionMismatch { expected, got })
    }
}
