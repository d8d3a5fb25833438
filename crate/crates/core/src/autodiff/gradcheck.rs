//! Finite-difference checks for every op, in both reverse and forward mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Scalar probe `sum(w * f(inputs))` with fixed random weights `w`.
fn probe(
    build: &Build,
    inputs: &[Tensor],
    weights: &Option<Tensor>,
) -> Result<(Graph, Vec<Var>, Var, Tensor)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let w = weights.clone().unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        random_tensor(&mut rng, g.value(y).shape(), -1.0, 1.0)
    });
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv)?;
    let s = g.sum(prod);
    Ok((g, vars, s, w))
}

/// Worst relative error `|ad - fd| / max(1, |fd|)` over all input coordinates,
/// for the reverse pass and for the tangent pass.
pub fn gradient_errors(build: &Build, inputs: Vec<Tensor>) -> Result<(f64, f64)> {
    let (g, vars, s, w) = probe(build, &inputs, &None)?;
    let grads = g.backward(s)?;
    let h = 1e-6;
    let mut worst_rev: f64 = 0.0;
    let mut fd_all = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let ad = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                let (g2, _, s2, _) = probe(build, &shifted, &Some(w.clone()))?;
                Ok(g2.value(s2).data()[0])
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            fd_all.push(fd);
            worst_rev = worst_rev.max((ad.data()[j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    // Tangent along a random direction must equal <fd gradient, direction>.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seeds: Vec<(Var, Tensor)> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| (*v, random_tensor(&mut rng, t.shape(), -1.0, 1.0)))
        .collect();
    let tangents = g.jvp(&seeds)?;
    let jvp = tangents.get(s).map_or(0.0, |t| t.data()[0]);
    let dirs: Vec<f64> = seeds.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let want: f64 = fd_all.iter().zip(&dirs).map(|(a, b)| a * b).sum();
    let worst_fwd = (jvp - want).abs() / want.abs().max(1.0);
    Ok((worst_rev, worst_fwd))
}

/// One differentiable op applied to random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub inputs: Vec<Tensor>,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    inputs: Vec<Tensor>,
) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        inputs,
    }
}

/// Every op of the engine (broadcasting variants included) on seeded inputs.
pub fn op_suite() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(&mut rng, shape, lo, hi);
    let mut c = Vec::new();
    c.push(case(
        "add",
        |g, x| g.add(x[0], x[1]),
        vec![r(&[3, 4], -1., 1.), r(&[3, 4], -1., 1.)],
    ));
    c.push(case(
        "add bias",
        |g, x| g.add(x[0], x[1]),
        vec![r(&[3, 4], -1., 1.), r(&[4], -1., 1.)],
    ));
    c.push(case(
        "sub col",
        |g, x| g.sub(x[0], x[1]),
        vec![r(&[3, 4], -1., 1.), r(&[3, 1], -1., 1.)],
    ));
    c.push(case(
        "mul",
        |g, x| g.mul(x[0], x[1]),
        vec![r(&[2, 5], -2., 2.), r(&[2, 5], -2., 2.)],
    ));
    c.push(case(
        "mul scalar",
        |g, x| g.mul(x[0], x[1]),
        vec![r(&[2, 5], -2., 2.), r(&[1], -2., 2.)],
    ));
    c.push(case(
        "mul general",
        |g, x| g.mul(x[0], x[1]),
        vec![r(&[2, 3, 2], -1., 1.), r(&[2, 1, 2], -1., 1.)],
    ));
    c.push(case(
        "div",
        |g, x| g.div(x[0], x[1]),
        vec![r(&[3, 3], -1., 1.), r(&[3, 1], 0.5, 2.)],
    ));
    c.push(case(
        "exp",
        |g, x| Ok(g.exp(x[0])),
        vec![r(&[4, 2], -1., 1.)],
    ));
    c.push(case(
        "log",
        |g, x| Ok(g.log(x[0])),
        vec![r(&[4, 2], 0.3, 2.)],
    ));
    c.push(case("sin", |g, x| Ok(g.sin(x[0])), vec![r(&[7], -3., 3.)]));
    c.push(case("cos", |g, x| Ok(g.cos(x[0])), vec![r(&[7], -3., 3.)]));
    c.push(case(
        "sqrt",
        |g, x| Ok(g.sqrt(x[0])),
        vec![r(&[5], 0.2, 3.)],
    ));
    c.push(case(
        "gelu",
        |g, x| Ok(g.gelu(x[0])),
        vec![r(&[3, 5], -3., 3.)],
    ));
    // Keep ReLU inputs away from the kink.
    c.push(case(
        "relu",
        |g, x| Ok(g.relu(x[0])),
        vec![Tensor::vector(vec![-1.2, -0.3, 0.4, 2.0])],
    ));
    c.push(case(
        "scale",
        |g, x| Ok(g.scale(x[0], -2.5)),
        vec![r(&[3], -1., 1.)],
    ));
    c.push(case(
        "matmul",
        |g, x| g.matmul(x[0], x[1]),
        vec![r(&[3, 4], -1., 1.), r(&[4, 2], -1., 1.)],
    ));
    c.push(case(
        "transpose",
        |g, x| g.transpose(x[0]),
        vec![r(&[3, 2], -1., 1.)],
    ));
    c.push(case(
        "reshape",
        |g, x| g.reshape(x[0], &[6]),
        vec![r(&[3, 2], -1., 1.)],
    ));
    c.push(case(
        "slice_cols",
        |g, x| g.slice_cols(x[0], 1, 3),
        vec![r(&[3, 4], -1., 1.)],
    ));
    c.push(case(
        "concat_cols",
        |g, x| g.concat_cols(&[x[0], x[1], x[0]]),
        vec![r(&[2, 3], -1., 1.), r(&[2, 1], -1., 1.)],
    ));
    c.push(case(
        "slice_rows",
        |g, x| g.slice_rows(x[0], 1, 2),
        vec![r(&[3, 4], -1., 1.)],
    ));
    c.push(case(
        "concat_rows",
        |g, x| g.concat_rows(&[x[0], x[1]]),
        vec![r(&[2, 3], -1., 1.), r(&[1, 3], -1., 1.)],
    ));
    c.push(case(
        "gather_rows",
        |g, x| g.gather_rows(x[0], &[2, 0, 2, 1]),
        vec![r(&[3, 2], -1., 1.)],
    ));
    c.push(case(
        "sum",
        |g, x| Ok(g.sum(x[0])),
        vec![r(&[3, 2], -1., 1.)],
    ));
    c.push(case(
        "mean",
        |g, x| Ok(g.mean(x[0])),
        vec![r(&[3, 2], -1., 1.)],
    ));
    c.push(case(
        "sum_cols",
        |g, x| g.sum_cols(x[0]),
        vec![r(&[3, 4], -1., 1.)],
    ));
    c.push(case(
        "layer_norm",
        |g, x| Ok(g.layer_norm(x[0])),
        vec![r(&[3, 6], -2., 2.)],
    ));
    c.push(case(
        "softmax",
        |g, x| Ok(g.softmax(x[0])),
        vec![r(&[2, 5], -2., 2.)],
    ));
    c.push(case(
        "attention",
        |g, x| g.attention(x[0], x[1], x[2], 2),
        vec![
            r(&[3, 4], -1., 1.),
            r(&[5, 4], -1., 1.),
            r(&[5, 4], -1., 1.),
        ],
    ));
    c.push(case(
        "attention self",
        |g, x| g.attention(x[0], x[0], x[0], 1),
        vec![r(&[4, 6], -1., 1.)],
    ));
    c
}
