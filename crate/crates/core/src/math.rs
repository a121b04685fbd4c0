//! Float functions for `no_std` builds on toolchains whose `core` lacks
//! them. Where `core` (or std, in test builds) has inherent methods, those
//! shadow these and the trait goes unused.
#![allow(dead_code)]

pub trait FloatExt {
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn log2(self) -> Self;
    fn round(self) -> Self;
    fn ceil(self) -> Self;
}

impl FloatExt for f64 {
    #[inline]
    fn exp(self) -> f64 {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        libm::log(self)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        libm::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        libm::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> f64 {
        libm::pow(self, f64::from(n))
    }
    #[inline]
    fn log2(self) -> f64 {
        libm::log2(self)
    }
    #[inline]
    fn round(self) -> f64 {
        libm::round(self)
    }
    #[inline]
    fn ceil(self) -> f64 {
        libm::ceil(self)
    }
}
