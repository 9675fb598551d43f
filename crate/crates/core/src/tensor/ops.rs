use crate::error::{Error, Result};
use crate::scalar::{f, s, Scalar};

use super::{SeededInit, Tensor};

/// Variance regularizer inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

/// `[m, k] x [k, n] -> [m, n]` with f64 accumulation.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2("matmul lhs")?;
    let [k2, n] = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
            context: "matmul inner dims",
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = f(ad[i * k + p]);
            if av == 0.0 {
                continue;
            }
            for (slot, &bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *slot += av * f(bv);
            }
        }
        out.extend(acc.iter().map(|&v| s::<T>(v)));
    }
    Ok(Tensor::raw(vec![m, n], out))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    assert!(axis < x.rank(), "softmax axis out of range");
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| f(xd[at(k)])).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (f(xd[at(k)]) - max).exp();
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[at(k)] = s(b / total);
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

/// Gradient of a loss through softmax, given the softmax output `y` and `dy`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.check_shape(dy, "softmax_backward")?;
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| f(yd[at(k)]) * f(gd[at(k)])).sum();
            for k in 0..n {
                out[at(k)] = s(f(yd[at(k)]) * (f(gd[at(k)]) - dot));
            }
        }
    }
    Ok(Tensor::raw(y.shape().to_vec(), out))
}

/// Layer normalization over the trailing axis without affine parameters.
pub fn layer_norm_noaffine<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean = row.iter().map(|&v| f(v)).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|&v| s::<T>((f(v) - mean) * inv)));
    }
    Tensor::raw(x.shape().to_vec(), out)
}

/// Input gradient of [`layer_norm_noaffine`].
pub fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_shape(dy, "layer_norm_backward")?;
    let c = x.last_dim();
    let n = c as f64;
    let mut out = Vec::with_capacity(x.len());
    for (row, g) in x.rows().zip(dy.rows()) {
        let mean = row.iter().map(|&v| f(v)).sum::<f64>() / n;
        let var = row.iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let y: Vec<f64> = row.iter().map(|&v| (f(v) - mean) * inv).collect();
        let g_mean = g.iter().map(|&v| f(v)).sum::<f64>() / n;
        let gy_mean = g.iter().zip(&y).map(|(&gv, yv)| f(gv) * yv).sum::<f64>() / n;
        out.extend(
            g.iter()
                .zip(&y)
                .map(|(&gv, yv)| s::<T>(inv * (f(gv) - g_mean - yv * gy_mean))),
        );
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

#[inline]
fn corners(p: [f64; 2], h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let (r0, c0) = (p[0].floor(), p[1].floor());
    let (fr, fc) = (p[0] - r0, p[1] - c0);
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ]
    .into_iter()
    .filter(move |&(r, c, wt)| {
        wt != 0.0 && r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64
    })
    .map(|(r, c, wt)| (r as usize, c as usize, wt))
}

/// Bilinear lookup of `map[h, w, c]` at fractional `(row, col)` points with
/// zero padding outside the grid; returns `[n, c]`.
pub fn bilinear_sample_2d<T: Scalar>(map: &Tensor<T>, points: &[[f64; 2]]) -> Result<Tensor<T>> {
    let [h, w, c] = dims3(map, "bilinear_sample_2d")?;
    let md = map.data();
    let mut out = Vec::with_capacity(points.len() * c);
    let mut acc = vec![0f64; c];
    for &p in points {
        acc.iter_mut().for_each(|v| *v = 0.0);
        if p[0].is_finite() && p[1].is_finite() {
            for (r, col, wt) in corners(p, h, w) {
                let base = (r * w + col) * c;
                for (a, &m) in acc.iter_mut().zip(&md[base..base + c]) {
                    *a += wt * f(m);
                }
            }
        }
        out.extend(acc.iter().map(|&v| s::<T>(v)));
    }
    Ok(Tensor::raw(vec![points.len(), c], out))
}

/// Gradient of [`bilinear_sample_2d`] with respect to the map.
pub fn bilinear_sample_2d_backward<T: Scalar>(
    map_shape: &[usize],
    points: &[[f64; 2]],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = match map_shape {
        &[h, w, c] => (h, w, c),
        _ => {
            return Err(Error::ShapeMismatch {
                left: map_shape.to_vec(),
                right: vec![0, 0, 0],
                context: "bilinear backward map",
            })
        }
    };
    if dout.shape() != [points.len(), c] {
        return Err(Error::ShapeMismatch {
            left: dout.shape().to_vec(),
            right: vec![points.len(), c],
            context: "bilinear backward dout",
        });
    }
    let mut grad = vec![0f64; h * w * c];
    for (p, g) in points.iter().zip(dout.rows()) {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        for (r, col, wt) in corners(*p, h, w) {
            let base = (r * w + col) * c;
            for (slot, &gv) in grad[base..base + c].iter_mut().zip(g) {
                *slot += wt * f(gv);
            }
        }
    }
    Ok(Tensor::raw(
        map_shape.to_vec(),
        grad.into_iter().map(|v| s::<T>(v)).collect(),
    ))
}

pub(crate) fn dims3<T: Scalar>(t: &Tensor<T>, context: &'static str) -> Result<[usize; 3]> {
    match t.shape()[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::ShapeMismatch {
            left: t.shape().to_vec(),
            right: vec![0, 0, 0],
            context,
        }),
    }
}

/// Affine map over the trailing axis: `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [_, out] = weight.dims2("linear weight")?;
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
                context: "linear bias",
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::from_fn(vec![n, n], |i| if i / n == i % n { T::one() } else { T::zero() }),
            bias: Tensor::zeros(vec![n]),
        }
    }

    /// Uniform weights in ±1/sqrt(inputs), zero bias.
    pub fn seeded(inputs: usize, outputs: usize, seed: u64) -> Self {
        let scale = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: SeededInit::uniform(seed, scale).tensor(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    fn flat_input(&self, x: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        if x.last_dim() != self.inputs() || x.rank() == 0 {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
                context: "linear input",
            });
        }
        let rows = x.len() / self.inputs();
        let lead = x.shape()[..x.rank() - 1].to_vec();
        Ok((lead, x.clone().reshape(vec![rows, self.inputs()])?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut lead, flat) = self.flat_input(x)?;
        let mut y = matmul(&flat, &self.weight)?;
        let n = self.outputs();
        let b = self.bias.data();
        for row in y.data_mut().chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        lead.push(n);
        y.reshape(lead)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
        let (_, flat) = self.flat_input(x)?;
        let rows = flat.shape()[0];
        if dy.len() != rows * self.outputs() {
            return Err(Error::ShapeMismatch {
                left: dy.shape().to_vec(),
                right: vec![rows, self.outputs()],
                context: "linear backward dy",
            });
        }
        let g = dy.clone().reshape(vec![rows, self.outputs()])?;
        let dx = matmul(&g, &self.weight.transpose()?)?.reshape(x.shape().to_vec())?;
        let dw = matmul(&flat.transpose()?, &g)?;
        let mut db = vec![0f64; self.outputs()];
        for row in g.rows() {
            for (a, &v) in db.iter_mut().zip(row) {
                *a += f(v);
            }
        }
        Ok(LinearGrads {
            input: dx,
            weight: dw,
            bias: Tensor::raw(vec![self.outputs()], db.into_iter().map(|v| s::<T>(v)).collect()),
        })
    }
}

/// Central-difference gradient check (step 1e-3). Returns the maximum over
/// elements of `|g_a - g_n| / max(1e-4, |g_a| + |g_n|)`.
pub fn grad_check<T: Scalar>(
    mut func: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
) -> Result<f64> {
    x.check_shape(analytic, "grad_check")?;
    let step = 1e-3;
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = s(f(orig) + step);
        let up = func(&probe);
        probe.data_mut()[i] = s(f(orig) - step);
        let down = func(&probe);
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = f(analytic.data()[i]);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    Ok(worst)
}
