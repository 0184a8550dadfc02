use ndarray::NdFloat;

/// Element type the whole engine is generic over. Production paths run f32;
/// the finite-difference gradient oracle runs the identical code at f64.
pub trait Scalar: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
