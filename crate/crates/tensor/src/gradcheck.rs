//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the largest relative error.
    pub worst_coordinate: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because the step crossed a relu or clamp kink.
    pub skipped: usize,
}

/// A differentiable scalar function built on a fresh graph from its inputs.
pub trait GraphFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> GraphFn for F {}

fn eval(f: &dyn GraphFn, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(TensorError::Rank(v.shape().to_vec()));
    }
    Ok((v.item(), g.branch_pattern()))
}

/// Checks every coordinate of every input.
pub fn grad_check(f: impl GraphFn, inputs: &[Tensor], eps: f64) -> Result<GradReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Checks only the listed `(input, element)` coordinates; useful when the
/// full parameter set is too large for two forward passes per coordinate.
/// A coordinate whose perturbed passes take a different branch at any relu
/// or clamp than the unperturbed pass is counted in `skipped`, since the
/// difference quotient there does not estimate the derivative.
pub fn grad_check_coords(
    f: impl GraphFn,
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Step(eps));
    }
    let (base, pattern) = eval(&f, inputs)?;
    let (again, _) = eval(&f, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Determinism {
            first: base,
            second: again,
        });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let (plus, pp) = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let (minus, pm) = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        if pp != pattern || pm != pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst_coordinate.is_none() {
            report.max_rel_err = rel;
            report.worst_coordinate = Some((i, j));
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// One registered op with a random-input generator and a scalar probe.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Box<dyn GraphFn>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero so kinks are never straddled by the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any output to a scalar with fixed, non-uniform weights so that
/// every output coordinate contributes a distinct gradient.
pub fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| ((i as f64) * 0.731 + 0.3).sin() + 0.1);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

macro_rules! case {
    ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: $inputs,
            f: Box::new(move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let y = $body;
                probe($g, y)
            }),
        }
    };
}

/// Every differentiable op of the engine, instantiated with inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let keep = vec![true, false, true, true];
    let target = Tensor::from_fn(&[1, 3, 3], |i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f64);
    let ids: Vec<usize> = (0..5).map(|i| (i * 3 + seed as usize) % 6).collect();
    vec![
        case!("matmul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1])?),
        case!("add", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| g.add(v[0], v[1])?),
        case!("add_scalar_broadcast", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
            |g, v| g.add(v[0], v[1])?),
        case!("sub", vec![uniform(r, &[4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, v| g.sub(v[0], v[1])?),
        case!("mul", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| g.mul(v[0], v[1])?),
        case!("mul_scalar_broadcast", vec![uniform(r, &[1], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)],
            |g, v| g.mul(v[0], v[1])?),
        case!("scale", vec![uniform(r, &[5], -1.0, 1.0)], |g, v| g.scale(v[0], -2.5)),
        case!("add_const", vec![uniform(r, &[5], -1.0, 1.0)], |g, v| g.add_const(v[0], 0.7)),
        case!("sigmoid", vec![uniform(r, &[6], -3.0, 3.0)], |g, v| g.sigmoid(v[0])),
        case!("log_sigmoid", vec![uniform(r, &[6], -3.0, 3.0)], |g, v| g.log_sigmoid(v[0])),
        case!("log", vec![uniform(r, &[6], 0.5, 2.0)], |g, v| g.log(v[0])?),
        case!("exp", vec![uniform(r, &[6], -1.0, 1.0)], |g, v| g.exp(v[0])),
        case!("relu", vec![away_from_zero(r, &[8])], |g, v| g.relu(v[0])),
        case!("softmax_rows", vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |g, v| g.softmax_rows(v[0], None)?),
        case!("softmax_rows_masked", vec![uniform(r, &[3, 4], -2.0, 2.0)],
            |g, v| g.softmax_rows(v[0], Some(&keep))?),
        case!("layer_norm", vec![
                uniform(r, &[3, 5], -2.0, 2.0),
                uniform(r, &[5], 0.5, 1.5),
                uniform(r, &[5], -0.5, 0.5),
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2])?),
        case!("conv2d_3x3_pad1", vec![
                uniform(r, &[2, 8, 8], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -0.5, 0.5),
                uniform(r, &[3], -0.5, 0.5),
            ],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?),
        case!("conv2d_stride2", vec![
                uniform(r, &[2, 8, 8], -1.0, 1.0),
                uniform(r, &[3, 2, 4, 4], -0.5, 0.5),
            ],
            |g, v| g.conv2d(v[0], v[1], None, 2, 1)?),
        case!("conv2d_patch4", vec![
                uniform(r, &[1, 8, 8], -1.0, 1.0),
                uniform(r, &[4, 1, 4, 4], -0.5, 0.5),
                uniform(r, &[4], -0.5, 0.5),
            ],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 4, 0)?),
        case!("upsample2x", vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], |g, v| g.upsample2x(v[0])?),
        case!("concat_channels", vec![
                uniform(r, &[1, 2, 3], -1.0, 1.0),
                uniform(r, &[2, 2, 3], -1.0, 1.0),
                uniform(r, &[1, 2, 3], -1.0, 1.0),
            ],
            |g, v| g.concat_channels(v)?),
        case!("concat_cols", vec![uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0)],
            |g, v| g.concat_cols(v)?),
        case!("transpose", vec![uniform(r, &[3, 2], -1.0, 1.0)], |g, v| g.transpose(v[0])?),
        case!("slice_rows", vec![uniform(r, &[4, 3], -1.0, 1.0)], |g, v| g.slice_rows(v[0], 1, 2)?),
        case!("slice_cols", vec![uniform(r, &[4, 3], -1.0, 1.0)], |g, v| g.slice_cols(v[0], 1, 2)?),
        case!("merge_patches", vec![uniform(r, &[16, 2], -1.0, 1.0)],
            |g, v| g.merge_patches(v[0], 4, 4)?),
        case!("tokens_grid", vec![uniform(r, &[3, 2, 2], -1.0, 1.0)], |g, v| {
            let t = g.to_tokens(v[0])?;
            let w = g.constant(Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.4).cos()));
            let mixed = g.matmul(t, w)?;
            g.to_grid(mixed, 2, 2)?
        }),
        case!("embed", vec![uniform(r, &[6, 3], -1.0, 1.0)], |g, v| g.embed(v[0], &ids)?),
        case!("add_row", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, v| g.add_row(v[0], v[1])?),
        case!("global_avg_pool", vec![uniform(r, &[5, 3], -1.0, 1.0)], |g, v| g.mean_rows(v[0])?),
        case!("sum", vec![uniform(r, &[2, 2], -1.0, 1.0)], |g, v| g.sum(v[0])),
        case!("mean", vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| g.mean(v[0])),
        case!("reshape", vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 2])?),
        case!("cosine", vec![uniform(r, &[1, 5], -1.0, 1.0), uniform(r, &[1, 5], -1.0, 1.0)],
            |g, v| g.cosine(v[0], v[1], 1e-8)?),
        case!("bce", vec![uniform(r, &[1, 3, 3], 0.05, 0.95)], |g, v| g.bce(v[0], &target, 1e-7)?),
    ]
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

/// Runs [`op_suite`] for every seed at step `eps`.
pub fn run_op_suite(seeds: impl IntoIterator<Item = u64>, eps: f64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for seed in seeds {
        for case in op_suite(seed) {
            let report = grad_check(&case.f, &case.inputs, eps)?;
            out.push(SuiteResult {
                name: case.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}
