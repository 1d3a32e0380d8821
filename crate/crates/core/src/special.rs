//! Complementary error function.

/// `erfc(z) = 2/sqrt(pi) * int_z^inf exp(-t^2) dt`, from `libm`.
pub fn erfc(z: f64) -> f64 {
    libm::erfc(z)
}

pub fn erf(z: f64) -> f64 {
    libm::erf(z)
}
