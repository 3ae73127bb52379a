//! Scalar abstraction so the numeric core runs in f32 (training) or f64
//! (gradient verification).

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Element dtype tag used in binary containers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Dtype> {
        match name {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point scalar for tensors, layers and optimizers.
pub trait Scalar:
    Float + NumAssignOps + Send + Sync + Debug + Display + Default + 'static
{
    fn dtype() -> Dtype;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn dtype() -> Dtype {
        Dtype::F32
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn dtype() -> Dtype {
        Dtype::F64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}
