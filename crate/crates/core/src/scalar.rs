//! Scalar abstraction shared by every numerical module.
//!
//! All model code is written against [`Real`], which is implemented for `f32`
//! and `f64`. Tolerances quoted throughout the crate assume `f64`; the `f32`
//! instantiation is useful for smoke runs and bandwidth-bound experiments.

use nalgebra::{Complex, DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default {}

impl Real for f32 {}
impl Real for f64 {}

pub type C<T> = Complex<T>;
pub type CVector<T> = DVector<Complex<T>>;
pub type CMatrix<T> = DMatrix<Complex<T>>;

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn cplx<T: Real>(re: T, im: T) -> C<T> {
    Complex::new(re, im)
}

#[inline]
pub fn creal<T: Real>(re: T) -> C<T> {
    Complex::new(re, T::zero())
}

/// `e^{iθ}`
#[inline]
pub fn cis<T: Real>(theta: T) -> C<T> {
    let (s, c) = theta.sin_cos();
    Complex::new(c, s)
}

#[inline]
pub fn norm_sqr<T: Real>(z: C<T>) -> T {
    z.re * z.re + z.im * z.im
}

pub fn vec_norm_sqr<T: Real>(v: &CVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, z| acc + norm_sqr(*z))
}

/// `⟨a, b⟩`, antilinear in the first slot.
pub fn inner<T: Real>(a: &CVector<T>, b: &CVector<T>) -> C<T> {
    a.iter()
        .zip(b.iter())
        .fold(Complex::new(T::zero(), T::zero()), |acc, (x, y)| acc + x.conj() * *y)
}

pub fn is_finite<T: Real>(z: C<T>) -> bool {
    let re = to_f64(z.re);
    let im = to_f64(z.im);
    re.is_finite() && im.is_finite()
}

#[inline]
pub fn cabs<T: Real>(z: C<T>) -> T {
    norm_sqr(z).sqrt()
}

#[inline]
pub fn cexp<T: Real>(z: C<T>) -> C<T> {
    cis(z.im) * z.re.exp()
}
