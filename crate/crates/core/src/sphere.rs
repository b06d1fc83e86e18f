//! Vectors on the unit 2-sphere: arithmetic, uniform and von Mises-Fisher
//! sampling, geodesic distance and equal-area binning.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> From<[T; 3]> for Vec3<T> {
    fn from(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T: Scalar> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        v.to_array()
    }
}

impl<T: Scalar> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(a: [f64; 3]) -> Self {
        Self::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]))
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.x.as_f64(), self.y.as_f64(), self.z.as_f64()]
    }

    pub fn get(&self, i: usize) -> T {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction, or `None` for (near) zero vectors.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        if n < T::tol() || !n.is_finite() {
            None
        } else {
            Some(*self * (T::one() / n))
        }
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - T::one()).abs() <= T::tol()
    }

    /// Great-circle distance between two unit vectors, in radians.
    pub fn geodesic(&self, o: &Self) -> T {
        // atan2 form stays accurate for nearly (anti)parallel vectors.
        self.cross(o).norm().atan2(self.dot(o))
    }

    /// Angle between two arbitrary nonzero vectors.
    pub fn angle(&self, o: &Self) -> T {
        self.geodesic(o)
    }

    /// Any unit vector orthogonal to `self` (assumed unit), plus a third
    /// completing a right-handed frame.
    pub fn orthonormal_frame(&self) -> (Self, Self) {
        let helper = if self.x.abs() < T::lit(0.9) {
            Self::new(T::one(), T::zero(), T::zero())
        } else {
            Self::new(T::zero(), T::one(), T::zero())
        };
        let u = self.cross(&helper).normalized().expect("helper not parallel");
        let v = self.cross(&u);
        (u, v)
    }

    pub fn cast<U: Scalar>(self) -> Vec3<U> {
        Vec3::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()), U::lit(self.z.as_f64()))
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Uniform draw on the unit sphere (normalized Gaussian triple).
pub fn sample_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Vec3<T> {
    loop {
        let g: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n > 1e-12 {
            return Vec3::from_f64([g[0] / n, g[1] / n, g[2] / n]);
        }
    }
}

/// Von Mises-Fisher draw on the 2-sphere around unit `mean` with
/// concentration `kappa`, using the closed-form inverse CDF of the cosine.
pub fn sample_vmf<T: Scalar, R: Rng + ?Sized>(rng: &mut R, mean: &Vec3<T>, kappa: f64) -> Vec3<T> {
    if kappa <= 0.0 {
        return sample_uniform(rng);
    }
    let u: f64 = rng.random();
    // w = 1 + ln(u + (1 - u) e^{-2k}) / k, written to avoid overflow for large k.
    let w = 1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa;
    let w = w.clamp(-1.0, 1.0);
    let phi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - w * w).max(0.0).sqrt();
    let m = mean.cast::<f64>();
    let (a, b) = m.orthonormal_frame();
    let x = m * w + a * (r * phi.cos()) + b * (r * phi.sin());
    x.normalized().unwrap_or(m).cast()
}

/// Equal-area latitude/longitude binning: `bands` slabs of equal height in z
/// (Archimedes) times `bands` longitude sectors.
pub fn equal_area_bin<T: Scalar>(v: &Vec3<T>, bands: usize) -> usize {
    let bands = bands.max(1);
    let z = v.z.as_f64().clamp(-1.0, 1.0);
    let zi = (((z + 1.0) / 2.0) * bands as f64).floor() as usize;
    let lon = v.y.as_f64().atan2(v.x.as_f64()) + std::f64::consts::PI;
    let li = ((lon / std::f64::consts::TAU) * bands as f64).floor() as usize;
    zi.min(bands - 1) * bands + li.min(bands - 1)
}
