use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("malformed weight blob: {0}")]
    Blob(String),
    #[error("weight blob dtype {found} does not match {expected}")]
    Dtype { expected: &'static str, found: String },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} missing from weight blob")]
    MissingParam(String),
}
