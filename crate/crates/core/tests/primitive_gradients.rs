//! Central finite differences against the tape for each primitive, through
//! the public API only.

use imamoe::autodiff::{Tape, Var};
use imamoe::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element gets a distinct cotangent.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&out.shape(), &mut rng);
    out.mul(tape.constant(&w))?.sum()
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        project(&tape, f(&tape, &vars).unwrap(), 7).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = project(&tape, f(&tape, &vars).unwrap(), 7).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, (var, t)) in vars.iter().zip(&inputs).enumerate() {
        let analytic = grads.get(*var).expect("gradient present").to_vec();
        for (k, &a) in analytic.iter().enumerate().take(t.numel()) {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[i].data_mut()[k] += H;
            minus[i].data_mut()[k] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                err < TOL,
                "{name}: input {i} entry {k}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_batched_and_shared() {
    check("matmul", &[&[2, 3, 4], &[2, 4, 5]], |_, v| {
        v[0].matmul(v[1])
    });
    check("matmul shared rhs", &[&[2, 3, 4], &[4, 5]], |_, v| {
        v[0].matmul(v[1])
    });
}

#[test]
fn linear_with_and_without_bias() {
    check("linear", &[&[3, 2, 4], &[5, 4], &[5]], |_, v| {
        v[0].linear(v[1], Some(v[2]))
    });
    check("linear nobias", &[&[3, 4], &[2, 4]], |_, v| {
        v[0].linear(v[1], None)
    });
}

#[test]
fn elementwise_with_broadcast() {
    check("add", &[&[2, 3, 4], &[3, 4]], |_, v| v[0].add(v[1]));
    check("sub", &[&[2, 3], &[3]], |_, v| v[0].sub(v[1]));
    check("mul", &[&[2, 3, 4], &[4]], |_, v| v[0].mul(v[1]));
    check("scale", &[&[3, 3]], |_, v| v[0].scale(-0.7));
}

#[test]
fn reductions() {
    check("sum_axis", &[&[2, 3, 4]], |_, v| v[0].sum_axis(1));
    check("mean_axis", &[&[2, 3, 4]], |_, v| v[0].mean_axis(2));
    check("mean", &[&[4, 5]], |_, v| v[0].mean());
}

#[test]
fn activations() {
    check("gelu", &[&[3, 7]], |_, v| v[0].gelu());
    check("relu", &[&[3, 7]], |_, v| v[0].relu());
}

#[test]
fn normalization_and_softmax() {
    check("layer_norm", &[&[2, 3, 6], &[6], &[6]], |_, v| {
        v[0].layer_norm(v[1], v[2])
    });
    check("softmax last", &[&[2, 3, 5]], |_, v| {
        v[0].softmax_temp(0.6, 2)
    });
    check("softmax middle", &[&[2, 4, 3]], |_, v| {
        v[0].softmax_temp(2.0, 1)
    });
    check("log_softmax", &[&[4, 3]], |_, v| v[0].log_softmax());
}

#[test]
fn shape_ops() {
    check("concat", &[&[2, 3], &[2, 4]], |_, v| {
        Var::concat(&[v[0], v[1]], 1)
    });
    check("slice", &[&[3, 5, 2]], |_, v| v[0].slice(1, 1, 3));
    check("transpose", &[&[2, 3, 4]], |_, v| v[0].transpose());
    check("reshape", &[&[2, 6]], |_, v| v[0].reshape(&[3, 4]));
    check("embedding", &[&[4, 3]], |_, v| {
        v[0].embedding(&[2, 0, 2, 3])
    });
    check("gather", &[&[3, 4]], |_, v| v[0].gather(&[1, 3, 0]));
}

#[test]
fn composite_attention_like_chain() {
    check(
        "attention chain",
        &[&[2, 4, 3], &[3, 3], &[3, 3]],
        |_, v| {
            let q = v[0].matmul(v[1])?;
            let k = v[0].matmul(v[2])?;
            let scores = q.matmul(k.transpose()?)?.softmax_temp(3f64.sqrt(), 2)?;
            scores.matmul(v[0])?.gelu()
        },
    );
}
