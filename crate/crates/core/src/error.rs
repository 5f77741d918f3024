use thiserror::Error;

use crate::mesh::Point;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point ({}, {}) lies outside the unit square", .0[0], .0[1])]
    OutOfDomain(Point),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("degenerate material: {0}")]
    DegenerateMaterial(String),
    #[error("inverted element: det F = {0}")]
    InvertedElement(f64),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver did not converge: {0}")]
    Solver(String),
    #[error("non-finite ELBO term `{term}`: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
