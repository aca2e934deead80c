//! Central finite-difference verification of the backward rules.

use rand::Rng;

use super::{Graph, Primitive, Result, Tensor, TensorError, Var};

/// Maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for the scalar function `f` at `input`.
pub fn finite_diff_check<F>(f: F, input: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_impl(&f, input, epsilon, None)
}

fn eval_scalar<F>(f: &F, x: Tensor, faulty: Option<Primitive>) -> Result<(Graph, Var, Var)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = match faulty {
        Some(p) => Graph::with_faulty_backward(p),
        None => Graph::new(),
    };
    let v = g.leaf(x.with_requires_grad(true));
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok((g, v, out))
}

fn check_impl<F>(f: &F, input: &Tensor, epsilon: f64, faulty: Option<Primitive>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let plain = Tensor::new(input.shape().to_vec(), input.data().to_vec())?;
    let (mut g, v, out) = eval_scalar(f, plain.clone(), faulty)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; plain.len()]);

    let scalar_at = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(plain.shape().to_vec(), data)?;
        let (g, _, out) = eval_scalar(f, t, None)?;
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    for i in 0..plain.len() {
        let mut up = plain.data().to_vec();
        up[i] += epsilon;
        let mut down = plain.data().to_vec();
        down[i] -= epsilon;
        let numeric = (scalar_at(up)? - scalar_at(down)?) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(TensorError::Overflow { op: "finite_diff_check" });
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

type Builder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// A random instance of one primitive: its operands and how to apply it.
pub struct PrimitiveCase {
    pub primitive: Primitive,
    pub inputs: Vec<Tensor>,
    build: Builder,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform in ±[lo, hi], keeping clear of kinks at the origin.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl PrimitiveCase {
    pub fn random<R: Rng>(primitive: Primitive, rng: &mut R) -> Self {
        let sq = |rng: &mut R| uniform(rng, &[3, 3], -1.0, 1.0);
        let (inputs, build): (Vec<Tensor>, Builder) = match primitive {
            Primitive::Add => (vec![sq(rng), sq(rng)], |g, v| g.add(v[0], v[1])),
            Primitive::Sub => (vec![sq(rng), sq(rng)], |g, v| g.sub(v[0], v[1])),
            Primitive::MulElementwise => (vec![sq(rng), sq(rng)], |g, v| g.mul(v[0], v[1])),
            Primitive::MatMul => (vec![sq(rng), uniform(rng, &[3, 2], -1.0, 1.0)], |g, v| {
                g.matmul(v[0], v[1])
            }),
            Primitive::Reshape => (vec![sq(rng)], |g, v| g.reshape(v[0], &[9])),
            Primitive::Concat => (vec![sq(rng), uniform(rng, &[3, 2], -1.0, 1.0)], |g, v| {
                g.concat(v, 1)
            }),
            Primitive::Mean => (vec![sq(rng)], |g, v| g.mean(v[0])),
            Primitive::Sum => (vec![sq(rng)], |g, v| g.sum(v[0])),
            Primitive::LeakyRelu => (vec![away_from_zero(rng, &[3, 3], 0.05, 1.0)], |g, v| {
                g.leaky_relu(v[0], 0.2)
            }),
            Primitive::Tanh => (vec![sq(rng)], |g, v| g.tanh(v[0])),
            Primitive::Sigmoid => (vec![uniform(rng, &[3, 3], -3.0, 3.0)], |g, v| g.sigmoid(v[0])),
            // Bounds at ±0.5, inputs kept at least 0.05 from them.
            Primitive::Clamp => {
                let mut x = away_from_zero(rng, &[3, 3], 0.0, 0.9);
                for v in x.data_mut() {
                    if (v.abs() - 0.5).abs() < 0.05 {
                        *v *= 1.25;
                    }
                }
                (vec![x], |g, v| g.clamp(v[0], -0.5, 0.5))
            }
            Primitive::Scale => (vec![sq(rng)], |g, v| g.scale(v[0], 1.7)),
            Primitive::AddScalar => (vec![sq(rng)], |g, v| g.add_scalar(v[0], 0.3)),
            Primitive::Ln => (vec![uniform(rng, &[3, 3], 0.5, 2.0)], |g, v| g.ln(v[0])),
            Primitive::Sqrt => (vec![uniform(rng, &[3, 3], 0.5, 2.0)], |g, v| g.sqrt(v[0])),
            Primitive::BiasAdd => (
                vec![uniform(rng, &[2, 3, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
                |g, v| g.bias_add(v[0], v[1]),
            ),
            Primitive::Conv2d => (
                vec![
                    uniform(rng, &[1, 2, 5, 5], -1.0, 1.0),
                    uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                ],
                |g, v| g.conv2d(v[0], v[1], 2, 1),
            ),
            Primitive::Conv2dTranspose => (
                vec![
                    uniform(rng, &[1, 2, 3, 3], -1.0, 1.0),
                    uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
                ],
                |g, v| g.conv2d_transpose(v[0], v[1], 2, 1),
            ),
            Primitive::PadReplicate => (vec![uniform(rng, &[1, 2, 3, 3], -1.0, 1.0)], |g, v| {
                g.pad_replicate(v[0], 2)
            }),
        };
        PrimitiveCase {
            primitive,
            inputs,
            build,
        }
    }

    /// Worst relative gradient error over all operands. The scalar probe is
    /// a fixed random weighting of the primitive's output.
    pub fn max_relative_error<R: Rng>(&self, rng: &mut R, epsilon: f64) -> Result<f64> {
        self.max_relative_error_impl(rng, epsilon, None)
    }

    #[doc(hidden)]
    pub fn max_relative_error_faulty<R: Rng>(&self, rng: &mut R, epsilon: f64, faulty: Primitive) -> Result<f64> {
        self.max_relative_error_impl(rng, epsilon, Some(faulty))
    }

    fn max_relative_error_impl<R: Rng>(&self, rng: &mut R, epsilon: f64, faulty: Option<Primitive>) -> Result<f64> {
        let mut probe_graph = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| probe_graph.constant(t.clone())).collect();
        let out = (self.build)(&mut probe_graph, &vars)?;
        let out_shape = probe_graph.shape(out).to_vec();
        let weights = uniform(rng, &out_shape, 0.5, 1.5);

        let mut worst = 0.0f64;
        for pos in 0..self.inputs.len() {
            let f = |g: &mut Graph, x: Var| -> Result<Var> {
                let vars: Vec<Var> = self
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == pos { x } else { g.constant(t.clone()) })
                    .collect();
                let y = (self.build)(g, &vars)?;
                g.disarm_fault();
                let w = g.constant(weights.clone());
                let wy = g.mul(y, w)?;
                g.sum(wy)
            };
            worst = worst.max(check_impl(&f, &self.inputs[pos], epsilon, faulty)?);
        }
        Ok(worst)
    }
}

/// One line of a gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub primitive: Primitive,
    pub max_relative_error: f64,
    pub passed: bool,
}

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Checks every primitive on `instances` random cases each. With `faulty`,
/// that primitive's backward rule is corrupted (negative control).
pub fn check_all_primitives<R: Rng>(
    rng: &mut R,
    instances: usize,
    faulty: Option<Primitive>,
) -> Result<Vec<GradcheckRow>> {
    Primitive::ALL
        .iter()
        .map(|&prim| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let case = PrimitiveCase::random(prim, rng);
                let err = match faulty {
                    Some(bad) => case.max_relative_error_faulty(rng, GRADCHECK_EPSILON, bad)?,
                    None => case.max_relative_error(rng, GRADCHECK_EPSILON)?,
                };
                worst = worst.max(err);
            }
            Ok(GradcheckRow {
                primitive: prim,
                max_relative_error: worst,
                passed: worst < GRADCHECK_TOLERANCE,
            })
        })
        .collect()
}
