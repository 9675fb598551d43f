use crate::error::{Error, Result};
use crate::scalar::{f, s, Scalar};
use crate::tensor::{derive_seed, dims3, softmax, Linear, Tensor};

use super::{join, Parameterized};

/// Single-scale deformable attention: each query predicts, per head,
/// `num_points` sampling offsets (in cells) and attention logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams<T> {
    pub num_heads: usize,
    pub num_points: usize,
    /// `c -> c`, applied before offsets and logits.
    pub query: Linear<T>,
    /// `c -> heads * points * 2` (row, col offsets).
    pub offset: Linear<T>,
    /// `c -> heads * points`
    pub weight: Linear<T>,
    /// `c -> c`
    pub value: Linear<T>,
    /// `c -> c`
    pub output: Linear<T>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTrace<T> {
    /// Head outputs before the output projection, `[n, c]`.
    pub pre_output: Tensor<T>,
    /// Attention weights `[n, heads, points]`.
    pub weights: Tensor<T>,
    /// Absolute sampling locations `[n, heads, points, 2]` for the first source.
    pub locations: Vec<[f64; 2]>,
}

impl<T: Scalar> DeformAttnParams<T> {
    pub fn seeded(c: usize, num_heads: usize, num_points: usize, seed: u64) -> Result<Self> {
        if num_heads == 0 || num_points == 0 || c % num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "deformable attention needs heads | c and points >= 1 (c {c}, heads {num_heads}, points {num_points})"
            )));
        }
        let mut offset = Linear::seeded(c, num_heads * num_points * 2, derive_seed(seed, "offset"));
        // small initial offsets keep samples near the reference
        offset.weight = offset.weight.scale(s(0.5));
        offset.bias = Tensor::from_fn(vec![num_heads * num_points * 2], |i| {
            let (hp, axis) = (i / 2, i % 2);
            let (head, point) = (hp / num_points, hp % num_points);
            let angle = 2.0 * std::f64::consts::PI * head as f64 / num_heads as f64;
            let radius = (point + 1) as f64 * 0.5;
            s(radius * if axis == 0 { angle.cos() } else { angle.sin() })
        });
        Ok(Self {
            num_heads,
            num_points,
            query: Linear::seeded(c, c, derive_seed(seed, "query")),
            offset,
            weight: Linear::seeded(c, num_heads * num_points, derive_seed(seed, "weight")),
            value: Linear::seeded(c, c, derive_seed(seed, "value")),
            output: Linear::seeded(c, c, derive_seed(seed, "output")),
        })
    }

    pub fn channels(&self) -> usize {
        self.value.outputs()
    }

    /// Attends over several value maps with their own reference points and
    /// averages the head outputs before the output projection.
    pub fn forward_multi(
        &self,
        queries: &Tensor<T>,
        sources: &[(&Tensor<T>, &[[f64; 2]])],
    ) -> Result<AttnTrace<T>> {
        let [n, c] = queries.dims2("deformable queries")?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                left: queries.shape().to_vec(),
                right: vec![n, self.channels()],
                context: "deformable queries",
            });
        }
        if sources.is_empty() {
            return Err(Error::Empty("deformable attention sources"));
        }
        let (heads, points) = (self.num_heads, self.num_points);
        let dh = c / heads;
        let q = self.query.forward(queries)?;
        let offsets = self.offset.forward(&q)?;
        let logits = self.weight.forward(&q)?.reshape(vec![n, heads, points])?;
        let weights = softmax(&logits, 2);
        let inv_sources = 1.0 / sources.len() as f64;

        let mut acc = vec![0f64; n * c];
        let mut first_locations = Vec::new();
        for (si, (map, refs)) in sources.iter().enumerate() {
            let [h, w, mc] = dims3(map, "deformable value map")?;
            if mc != c {
                return Err(Error::ShapeMismatch {
                    left: map.shape().to_vec(),
                    right: vec![h, w, c],
                    context: "deformable value map channels",
                });
            }
            if refs.len() != n {
                return Err(Error::LengthMismatch(refs.len(), n));
            }
            let v = self.value.forward(map)?;
            let vd = v.data();
            for qi in 0..n {
                let off = &offsets.data()[qi * heads * points * 2..(qi + 1) * heads * points * 2];
                let wq = &weights.data()[qi * heads * points..(qi + 1) * heads * points];
                let out = &mut acc[qi * c..(qi + 1) * c];
                for m in 0..heads {
                    for p in 0..points {
                        let k = m * points + p;
                        let loc = [
                            refs[qi][0] + f(off[2 * k]),
                            refs[qi][1] + f(off[2 * k + 1]),
                        ];
                        if si == 0 {
                            first_locations.push(loc);
                        }
                        let a = f(wq[k]) * inv_sources;
                        sample_add(vd, h, w, c, m * dh, dh, loc, a, &mut out[m * dh..(m + 1) * dh]);
                    }
                }
            }
        }
        Ok(AttnTrace {
            pre_output: Tensor::raw(vec![n, c], acc.into_iter().map(|v| s::<T>(v)).collect()),
            weights,
            locations: first_locations,
        })
    }

    pub fn forward(
        &self,
        queries: &Tensor<T>,
        sources: &[(&Tensor<T>, &[[f64; 2]])],
    ) -> Result<Tensor<T>> {
        let trace = self.forward_multi(queries, sources)?;
        self.output.forward(&trace.pre_output)
    }
}

/// Adds `a * bilinear(map[.., ch0..ch0+len], loc)` into `out` (zero padding).
#[allow(clippy::too_many_arguments)]
#[inline]
fn sample_add<T: Scalar>(
    map: &[T],
    h: usize,
    w: usize,
    c: usize,
    ch0: usize,
    len: usize,
    loc: [f64; 2],
    a: f64,
    out: &mut [f64],
) {
    if !(loc[0].is_finite() && loc[1].is_finite()) || a == 0.0 {
        return;
    }
    let (r0, c0) = (loc[0].floor(), loc[1].floor());
    let (fr, fc) = (loc[0] - r0, loc[1] - c0);
    let taps = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    for (r, col, wt) in taps {
        if wt == 0.0 || r < 0.0 || col < 0.0 || r >= h as f64 || col >= w as f64 {
            continue;
        }
        let base = (r as usize * w + col as usize) * c + ch0;
        let scale = a * wt;
        for (o, &m) in out.iter_mut().zip(&map[base..base + len]) {
            *o += scale * f(m);
        }
    }
}

/// Deformable attention of `queries [n, c]` over `value_map [h, w, c]` at
/// fractional `(row, col)` references.
pub fn deformable_attention<T: Scalar>(
    queries: &Tensor<T>,
    value_map: &Tensor<T>,
    ref_points: &[[f64; 2]],
    params: &DeformAttnParams<T>,
) -> Result<Tensor<T>> {
    params.forward(queries, &[(value_map, ref_points)])
}

impl<T: Scalar> Parameterized<T> for DeformAttnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.offset.visit(&join(prefix, "offset"), f);
        self.weight.visit(&join(prefix, "weight"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
        self.weight.visit_mut(&join(prefix, "weight"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
