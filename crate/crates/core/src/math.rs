//! Small dense linear algebra helpers shared by the rasterizer, the feature
//! field and the attention head. Everything is generic over [`Real`] so the
//! gradient-check harness can rerun the exact same code paths in f64.

use num_traits::Float;

/// Scalar abstraction: the pipeline runs in f32, the finite-difference
/// harness in f64.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity with the denominator floored at `eps`.
pub fn cosine<T: Real>(a: &[T], b: &[T], eps: T) -> T {
    dot(a, b) / (norm(a) * norm(b)).max(eps)
}

/// Rotation matrix (row-major) from a quaternion in (w, x, y, z) order.
/// The quaternion is normalized before conversion.
pub fn quat_to_rot<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let two = T::of(2.0);
    [
        [
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        ],
    ]
}

pub fn mat3_mul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose<T: Real>(a: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_mul_vec3<T: Real>(a: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Symmetric 2x2 matrix stored as (xx, xy, yy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Real> Sym2<T> {
    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn inverse(&self) -> Sym2<T> {
        let d = self.det();
        Sym2 {
            xx: self.yy / d,
            xy: -self.xy / d,
            yy: self.xx / d,
        }
    }

    pub fn max_eigenvalue(&self) -> T {
        let half = T::of(0.5);
        let mid = (self.xx + self.yy) * half;
        let diff = (self.xx - self.yy) * half;
        mid + (diff * diff + self.xy * self.xy).sqrt()
    }

    /// Mahalanobis quadratic form d^T self d.
    pub fn quad(&self, d: [T; 2]) -> T {
        self.xx * d[0] * d[0] + T::of(2.0) * self.xy * d[0] * d[1] + self.yy * d[1] * d[1]
    }
}
