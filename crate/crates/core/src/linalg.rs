//! Fixed-size 2×2 / 3×3 helpers used by the projection math.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_add(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pull `dL/dR` back to the (unit) quaternion components.
pub fn quat_to_rotation_backward(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    [
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]),
        2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]),
        2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]),
    ]
}

/// Gradient through `q̂ = q / ‖q‖`.
pub fn normalize_backward(q: &[f64; 4], norm: f64, g_hat: &[f64; 4]) -> [f64; 4] {
    let qh = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let d = qh[0] * g_hat[0] + qh[1] * g_hat[1] + qh[2] * g_hat[2] + qh[3] * g_hat[3];
    [
        (g_hat[0] - qh[0] * d) / norm,
        (g_hat[1] - qh[1] * d) / norm,
        (g_hat[2] - qh[2] * d) / norm,
        (g_hat[3] - qh[3] * d) / norm,
    ]
}

/// Cholesky factor of a symmetric positive-definite 3×3; `None` if not SPD.
pub fn cholesky3(a: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor.
pub fn cholesky_solve3(l: &Mat3, b: &Vec3) -> Vec3 {
    let mut y = [0.0; 3];
    for i in 0..3 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = y[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Rigid 4×4 transform (row-major) applied to a point.
pub fn transform_point(t: &[[f64; 4]; 4], p: &Vec3) -> Vec3 {
    [
        t[0][0] * p[0] + t[0][1] * p[1] + t[0][2] * p[2] + t[0][3],
        t[1][0] * p[0] + t[1][1] * p[1] + t[1][2] * p[2] + t[1][3],
        t[2][0] * p[0] + t[2][1] * p[1] + t[2][2] * p[2] + t[2][3],
    ]
}

pub fn rotation_block(t: &[[f64; 4]; 4]) -> Mat3 {
    [
        [t[0][0], t[0][1], t[0][2]],
        [t[1][0], t[1][1], t[1][2]],
        [t[2][0], t[2][1], t[2][2]],
    ]
}

/// Inverse of a rigid transform `[R | t]`: `[Rᵀ | −Rᵀ t]`.
pub fn rigid_inverse(t: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let r = rotation_block(t);
    let rt = transpose3(&r);
    let tr = mat3_vec(&rt, &[t[0][3], t[1][3], t[2][3]]);
    [
        [rt[0][0], rt[0][1], rt[0][2], -tr[0]],
        [rt[1][0], rt[1][1], rt[1][2], -tr[1]],
        [rt[2][0], rt[2][1], rt[2][2], -tr[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub const IDENTITY4: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.2];
        let g = [[0.3, -1.0, 0.5], [0.7, 0.2, -0.4], [-0.6, 0.9, 0.1]];
        let f = |q: &[f64; 4]| {
            let r = quat_to_rotation(q);
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum::<f64>()
        };
        let a = quat_to_rotation_backward(&q, &g);
        for k in 0..4 {
            let (mut qp, mut qm) = (q, q);
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let n = (f(&qp) - f(&qm)) / 2e-6;
            assert!((a[k] - n).abs() < 1e-8, "{k}: {} vs {n}", a[k]);
        }
    }

    #[test]
    fn rigid_inverse_round_trips() {
        let r = quat_to_rotation(&[0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0]);
        let t = [
            [r[0][0], r[0][1], r[0][2], 1.0],
            [r[1][0], r[1][1], r[1][2], -2.0],
            [r[2][0], r[2][1], r[2][2], 0.5],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let p = [0.3, 0.7, -1.1];
        let back = transform_point(&rigid_inverse(&t), &transform_point(&t, &p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-12);
        }
    }
}
