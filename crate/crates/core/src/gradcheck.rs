//! Central finite-difference verification of reverse-mode gradients.
//!
//! Each [`Case`] draws random inputs from a seed, builds a scalar loss on a
//! fresh [`Graph`], and compares the tape's gradient with
//! `(f(x + h) − f(x − h)) / 2h` coordinate by coordinate. The error reported
//! for an input tensor is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
//! over the probed coordinates, with the denominator floored at
//! [`RELATIVE_FLOOR`] times the largest gradient norm of the case; a case
//! reports the worst tensor and seed.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Packing, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Step used by the central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Fraction of the case's largest gradient norm below which a tensor's
/// differences are measured against that scale instead of its own norm. Some
/// gradients vanish identically (a bias added to every key shifts each score
/// row uniformly), leaving only finite-difference round-off to compare.
pub const RELATIVE_FLOOR: f64 = 1e-3;
/// Acceptable relative error between analytic and numeric gradients.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Random inputs for one seed: differentiated `inputs` plus fixed `constants`.
#[derive(Clone, Debug)]
pub struct Problem {
    pub inputs: Vec<Tensor>,
    pub constants: Vec<Tensor>,
}

type MakeFn = dyn Fn(&mut Rng) -> Problem + Send + Sync;
type BuildFn = dyn Fn(&mut Graph, &[Var], &[Var]) -> Result<Var> + Send + Sync;
type AnalyticFn = dyn Fn(&Problem) -> Result<Vec<Vec<f64>>> + Send + Sync;

#[derive(Clone)]
pub struct Case {
    pub name: String,
    make: Arc<MakeFn>,
    build: Arc<BuildFn>,
    analytic: Option<Arc<AnalyticFn>>,
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Case").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        make: impl Fn(&mut Rng) -> Problem + Send + Sync + 'static,
        build: impl Fn(&mut Graph, &[Var], &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            make: Arc::new(make),
            build: Arc::new(build),
            analytic: None,
            max_coords: 64,
        }
    }

    /// Replaces the tape gradient with a hand-written one. Used to exercise
    /// the checker itself against a deliberately wrong backward rule.
    pub fn with_analytic(
        mut self,
        f: impl Fn(&Problem) -> Result<Vec<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        self.analytic = Some(Arc::new(f));
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = n;
        self
    }

    fn loss(&self, p: &Problem) -> Result<f64> {
        let mut g = Graph::new();
        let ins: Vec<Var> = p.inputs.iter().map(|t| g.param(t.clone())).collect();
        let cs: Vec<Var> = p.constants.iter().map(|t| g.constant(t.clone())).collect();
        let loss = (self.build)(&mut g, &ins, &cs)?;
        Ok(g.value(loss).item())
    }

    fn tape_gradients(&self, p: &Problem) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let ins: Vec<Var> = p.inputs.iter().map(|t| g.param(t.clone())).collect();
        let cs: Vec<Var> = p.constants.iter().map(|t| g.constant(t.clone())).collect();
        let loss = (self.build)(&mut g, &ins, &cs)?;
        g.backward(loss)?;
        Ok(ins
            .iter()
            .zip(&p.inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect())
    }

    /// Worst relative error over all input tensors for one seed.
    pub fn check_seed(&self, seed: u64, step: f64) -> Result<f64> {
        let mut rng = rng::seeded(seed);
        let mut problem = (self.make)(&mut rng);
        let analytic = match &self.analytic {
            Some(f) => f(&problem)?,
            None => self.tape_gradients(&problem)?,
        };
        let mut norms = Vec::with_capacity(problem.inputs.len());
        for t in 0..problem.inputs.len() {
            let n = problem.inputs[t].len();
            let coords: Vec<usize> = if n <= self.max_coords {
                (0..n).collect()
            } else {
                let mut c = sample(&mut rng, n, self.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let mut diff2 = 0.0;
            let mut a2 = 0.0;
            let mut n2 = 0.0;
            for &c in &coords {
                let orig = problem.inputs[t].data()[c];
                problem.inputs[t].data_mut()[c] = orig + step;
                let fp = self.loss(&problem)?;
                problem.inputs[t].data_mut()[c] = orig - step;
                let fm = self.loss(&problem)?;
                problem.inputs[t].data_mut()[c] = orig;
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic[t][c];
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
            }
            norms.push((diff2.sqrt(), a2.sqrt().max(n2.sqrt())));
        }
        let scale = norms.iter().map(|n| n.1).fold(f64::MIN_POSITIVE, f64::max);
        let worst = norms
            .iter()
            .map(|&(diff, own)| diff / own.max(RELATIVE_FLOOR * scale))
            .fold(0.0, f64::max);
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Runs every case over `seeds` seeds (0, 1, …).
pub fn run(cases: &[Case], seeds: usize, step: f64) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                worst = worst.max(case.check_seed(s as u64, step)?);
            }
            Ok(CaseReport {
                name: case.name.clone(),
                seeds,
                max_rel_error: worst,
            })
        })
        .collect()
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `Σ y ⊙ r` for a fixed random `r`: turns any op output into a scalar whose
/// gradient exercises every output coordinate.
pub fn project(g: &mut Graph, y: Var, r: Var) -> Result<Var> {
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Case for a unary op: inputs of the given shapes, projection of the output.
fn op_case(
    name: &str,
    shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case::new(
        name,
        move |rng| Problem {
            inputs: shapes.iter().map(|s| randn(s, rng)).collect(),
            constants: vec![randn(&out_shape, rng)],
        },
        move |g, ins, cs| {
            let y = f(g, ins)?;
            project(g, y, cs[0])
        },
    )
}

/// Gradient checks for every differentiable primitive of [`Graph`].
pub fn op_suite() -> Vec<Case> {
    let mut cases = vec![
        op_case("matmul", vec![vec![5, 4], vec![4, 3]], vec![5, 3], |g, x| g.matmul(x[0], x[1])),
        op_case("matmul_batched_lhs", vec![vec![2, 3, 4], vec![4, 2]], vec![2, 3, 2], |g, x| g.matmul(x[0], x[1])),
        op_case("bmm", vec![vec![3, 4, 5], vec![3, 5, 2]], vec![3, 4, 2], |g, x| g.bmm(x[0], x[1], false)),
        op_case("bmm_transposed", vec![vec![3, 4, 5], vec![3, 6, 5]], vec![3, 4, 6], |g, x| g.bmm(x[0], x[1], true)),
        op_case("add", vec![vec![3, 4], vec![3, 4]], vec![3, 4], |g, x| g.add(x[0], x[1])),
        op_case("sub", vec![vec![3, 4], vec![3, 4]], vec![3, 4], |g, x| g.sub(x[0], x[1])),
        op_case("mul", vec![vec![3, 4], vec![3, 4]], vec![3, 4], |g, x| g.mul(x[0], x[1])),
        op_case("scale", vec![vec![3, 4]], vec![3, 4], |g, x| Ok(g.scale(x[0], -1.7))),
        op_case("add_trailing", vec![vec![2, 3, 4], vec![3, 4]], vec![2, 3, 4], |g, x| g.add_trailing(x[0], x[1])),
        op_case("conv1d", vec![vec![2, 7, 3], vec![2, 3, 5], vec![2]], vec![2, 7, 2], |g, x| g.conv1d(x[0], x[1], x[2])),
        op_case("conv1d_same", vec![vec![3, 7], vec![2, 3, 5], vec![2]], vec![2, 7], |g, x| g.conv1d_same(x[0], x[1], x[2])),
        op_case("attention", vec![vec![2, 3, 5, 4], vec![2, 3, 5, 4], vec![2, 3, 5, 4]], vec![2, 3, 5, 4], |g, x| g.attention(x[0], x[1], x[2])),
        op_case("multi_head_attention", vec![vec![2, 5, 6], vec![2, 5, 6], vec![2, 5, 6]], vec![2, 5, 6], |g, x| g.multi_head_attention(x[0], x[1], x[2], 3)),
        op_case("packed_attention_columns", vec![vec![2, 5, 12]], vec![2, 5, 4], |g, x| g.packed_attention(x[0], 2, Packing::Columns)),
        op_case("packed_attention_rows", vec![vec![2, 9, 4]], vec![2, 3, 4], |g, x| g.packed_attention(x[0], 2, Packing::Rows)),
        op_case("softmax", vec![vec![4, 5]], vec![4, 5], |g, x| Ok(g.softmax(x[0]))),
        op_case("layer_norm", vec![vec![4, 6], vec![6], vec![6]], vec![4, 6], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        op_case("gelu", vec![vec![4, 5]], vec![4, 5], |g, x| Ok(g.gelu(x[0]))),
        op_case("permute", vec![vec![2, 3, 4]], vec![4, 2, 3], |g, x| g.permute(x[0], &[2, 0, 1])),
        op_case("transpose", vec![vec![2, 3, 4]], vec![2, 4, 3], |g, x| g.transpose(x[0])),
        op_case("reshape", vec![vec![2, 6]], vec![3, 4], |g, x| g.reshape(x[0], [3, 4])),
        op_case("concat", vec![vec![2, 3, 2], vec![2, 1, 2]], vec![2, 4, 2], |g, x| g.concat(&[x[0], x[1]], 1)),
        op_case("slice", vec![vec![2, 5, 3]], vec![2, 2, 3], |g, x| g.slice(x[0], 1, 2, 2)),
        op_case("split", vec![vec![4, 6]], vec![4, 2], |g, x| {
            let parts = g.split(x[0], 1, &[2, 4])?;
            let tail = g.slice(parts[1], 1, 1, 2)?;
            g.mul(parts[0], tail)
        }),
        op_case("mean", vec![vec![3, 4, 2]], vec![3, 2], |g, x| g.mean(x[0], 1)),
        op_case("mean_all", vec![vec![3, 4]], vec![], |g, x| Ok(g.mean_all(x[0]))),
        op_case("sum", vec![vec![3, 4]], vec![], |g, x| Ok(g.sum(x[0]))),
        op_case("dropout", vec![vec![5, 6]], vec![5, 6], |g, x| {
            let mut rng = rng::seeded(99);
            g.dropout(x[0], 0.3, &mut rng)
        }),
        op_case("weighted_sum", vec![vec![3, 4], vec![3, 4], vec![3, 4], vec![3]], vec![3, 4], |g, x| {
            g.weighted_sum(&[x[0], x[1], x[2]], x[3])
        }),
        op_case("norm_last", vec![vec![4, 3]], vec![4], |g, x| g.norm_last(x[0])),
    ];
    for c in &mut cases {
        c.max_coords = 256;
    }
    cases
}

/// [`op_suite`] followed by the model cases of
/// [`crate::model::gradcheck_cases`].
pub fn full_suite() -> Vec<Case> {
    let mut cases = op_suite();
    cases.extend(crate::model::gradcheck_cases());
    cases
}

/// A case whose analytic gradient comes from a deliberately wrong rule
/// (`d/dx x³` taken as `2x²`). The checker must flag it.
pub fn faulty_case() -> Case {
    Case::new(
        "faulty_cube",
        |rng| Problem {
            inputs: vec![randn(&[6], rng)],
            constants: vec![],
        },
        |g, x, _| {
            let sq = g.mul(x[0], x[0])?;
            let cube = g.mul(sq, x[0])?;
            Ok(g.sum(cube))
        },
    )
    .with_analytic(|p| Ok(vec![p.inputs[0].data().iter().map(|v| 2.0 * v * v).collect()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let reports = run(&op_suite(), 3, DEFAULT_STEP).unwrap();
        for r in &reports {
            assert!(r.passed(DEFAULT_TOLERANCE), "{} rel err {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn wrong_backward_rule_is_flagged() {
        let r = run(&[faulty_case()], 3, DEFAULT_STEP).unwrap();
        assert!(!r[0].passed(DEFAULT_TOLERANCE));
        assert!(r[0].max_rel_error > 0.1);
    }
}
