use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("{what} = {value} is outside its domain ({expected})")]
    Domain {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("input is not a permutation of 0..{n}")]
    NotPermutation { n: usize },
    #[error("position {pos} is out of range 1..={max}")]
    PositionOutOfRange { pos: usize, max: usize },
    #[error("positions are not strictly increasing at index {index}")]
    PositionsNotIncreasing { index: usize },
    #[error("gap index {index} is out of range 0..={max}")]
    GapIndex { index: usize, max: usize },
    #[error("token {token} at position {pos} is unreachable from the clean sequence")]
    Unreachable { pos: usize, token: u32 },
    #[error("partial sequence disagrees with the clean sequence at index {index}")]
    Inconsistent { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("generated length {len} exceeds the maximum length {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("infeasible task config: {0}")]
    Config(String),
    #[error("node label {label} does not fit a pool of {pool} labels")]
    VocabOverflow { label: u32, pool: u32 },
    #[error("malformed serialized instance: {0}")]
    Malformed(String),
}

pub(crate) fn check_unit(what: &'static str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(CoreError::Domain {
            what,
            value: x,
            expected: "[0, 1]",
        })
    }
}

pub(crate) fn check_positive(what: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Domain {
            what,
            value: x,
            expected: "finite and > 0",
        })
    }
}
