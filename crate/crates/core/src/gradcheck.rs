//! Central finite-difference checks of the reverse-mode tape, in f64.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::models::{build_model, Architecture, ModelSpec};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Floor of the relative-error denominator. Central differences at this
/// epsilon carry round-off of roughly `|loss| * 1e-11`, so gradients below
/// the floor are judged by absolute error.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub seed: u64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a relu or
    /// max-pool branch, where central differences do not estimate the
    /// derivative.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn normal(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("sized above")
}

/// Compares tape gradients of the scalar `f(leaves)` against central
/// differences on up to `per_leaf` random coordinates of every leaf.
/// Coordinates whose perturbation crosses a kink are replaced by others.
pub fn check_graph<F>(name: &str, seed: u64, leaves: &[Tensor<f64>], per_leaf: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_signature()))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut rng = rng::stream(seed, 0x6C);
    let mut work = leaves.to_vec();
    let mut report = GradReport {
        name: name.to_string(),
        seed,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(vars[li]) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(leaf.shape().to_vec());
                &zeros
            }
        };
        let candidates = index::sample(&mut rng, leaf.len(), (4 * per_leaf).min(leaf.len()));
        let mut accepted = 0;
        for j in candidates {
            if accepted == per_leaf {
                break;
            }
            let orig = leaf.data()[j];
            work[li].data_mut()[j] = orig + EPSILON;
            let (up, sig_up) = eval(&work)?;
            work[li].data_mut()[j] = orig - EPSILON;
            let (down, sig_down) = eval(&work)?;
            work[li].data_mut()[j] = orig;
            if sig_up != base || sig_down != base {
                report.skipped += 1;
                continue;
            }
            accepted += 1;
            let numeric = (up - down) / (2.0 * EPSILON);
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic.data()[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Input shape used to check each architecture.
pub fn check_input_shape(arch: Architecture) -> Vec<usize> {
    match arch {
        Architecture::Cnn2 => vec![3, 32, 32],
        _ => vec![1, 28, 28],
    }
}

/// Gradient check of cross-entropy through a freshly initialized model on
/// a random batch, covering at least `min_params` parameters spread over
/// every tensor.
pub fn check_architecture(arch: Architecture, seed: u64, min_params: usize) -> Result<GradReport> {
    let spec = ModelSpec::new(arch, check_input_shape(arch), 10);
    let model = build_model::<f64>(&spec, seed)?;
    let mut rng = rng::stream(seed, 0x6D);
    let batch = 2;
    let mut shape = vec![batch];
    shape.extend(spec.input_shape.iter());
    let x = normal(&mut rng, shape);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..10)).collect();
    let per_leaf = min_params.div_ceil(model.params().len());
    check_graph(arch.name(), seed, model.params(), per_leaf, |tape, vars| {
        let input = tape.constant(x.clone());
        let logits = model.forward(tape, vars, input)?;
        tape.cross_entropy(logits, &labels)
    })
}

/// The random linear functional `sum(out * r)` of a node.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = normal(&mut rng::stream(seed, 0x70), shape);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Checks every differentiable tape operation in isolation.
pub fn check_ops(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = rng::stream(seed, 0x71);
    let mut t = |shape: &[usize]| normal(&mut rng, shape.to_vec());
    let per = 64;
    let mut out = Vec::new();

    let (a, b) = (t(&[4, 3]), t(&[3, 5]));
    out.push(check_graph("matmul", seed, &[a, b], per, |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        project(tape, y, seed)
    })?);

    let (x, bias) = (t(&[3, 4]), t(&[4]));
    out.push(check_graph("add_bias", seed, &[x, bias], per, |tape, v| {
        let y = tape.add_bias(v[0], v[1])?;
        project(tape, y, seed)
    })?);

    for (name, kernel, stride, padding) in [
        ("conv2d_3x3", 3, 1, 0),
        ("conv2d_3x3_pad1", 3, 1, 1),
        ("conv2d_3x3_stride2", 3, 2, 1),
        ("conv2d_5x5_pad2", 5, 1, 2),
    ] {
        let leaves = [t(&[2, 3, 7, 7]), t(&[4, 3, kernel, kernel]), t(&[4])];
        out.push(check_graph(name, seed, &leaves, per, |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            project(tape, y, seed)
        })?);
    }

    let x = t(&[2, 2, 5, 5]);
    out.push(check_graph("maxpool2x2", seed, &[x], per, |tape, v| {
        let y = tape.maxpool2x2(v[0])?;
        project(tape, y, seed)
    })?);

    let x = t(&[3, 6]);
    out.push(check_graph("relu", seed, &[x], per, |tape, v| {
        let y = tape.relu(v[0]);
        project(tape, y, seed)
    })?);

    let x = t(&[2, 3, 2, 2]);
    out.push(check_graph("flatten", seed, &[x], per, |tape, v| {
        let y = tape.flatten(v[0])?;
        project(tape, y, seed)
    })?);

    let (x, y) = (t(&[3, 4]), t(&[3, 4]));
    out.push(check_graph("elementwise", seed, &[x, y], per, |tape, v| {
        let p = tape.mul(v[0], v[1])?;
        let d = tape.sub(p, v[1])?;
        let s = tape.scale(d, 0.7);
        let z = tape.add(s, v[0])?;
        project(tape, z, seed)
    })?);

    let logits = t(&[4, 5]);
    out.push(check_graph("cross_entropy", seed, &[logits], per, |tape, v| {
        tape.cross_entropy(v[0], &[0, 3, 4, 1])
    })?);

    for (name, tau) in [("kl_div", 1.0), ("kl_div_tau2", 2.0)] {
        let teacher = t(&[3, 5]);
        let student = t(&[3, 5]);
        out.push(check_graph(name, seed, &[student], per, |tape, v| {
            let teacher = tape.constant(teacher.clone());
            tape.kl_div(teacher, v[0], tau)
        })?);
    }
    Ok(out)
}
