//! Every differentiable operation checked against central differences.

use hazekit_tape::gradcheck::{central_differences, relative_error};
use hazekit_tape::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Builds `sum(op(inputs) * probe)` so every output element matters with a
/// distinct weight, then compares the analytic gradient of every input with
/// central differences.
fn check(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval = |ts: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Vec<Option<Tensor<f64>>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let p = probe.cloned().unwrap_or_else(|| Tensor::new(shape.clone(), vec![1.0; g.value(out).numel()]));
        let pv = g.constant(p.clone());
        let prod = g.mul(out, pv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let value = g.value(loss).item();
        (value, vars.iter().map(|&v| grads.get(v).cloned()).collect(), p)
    };
    // establish the probe shape
    let (_, _, ones) = eval(&inputs, None);
    let probe = random(ones.shape(), &mut rng, -1.0, 1.0);
    let (_, grads, _) = eval(&inputs, Some(&probe));
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads[which].as_ref().expect("gradient for every variable");
        let idx: Vec<usize> = (0..input.numel().min(12)).map(|i| (i * 7919) % input.numel()).collect();
        let numeric = central_differences(input.data(), &idx, 1e-5, |x| {
            let mut ts = inputs.clone();
            ts[which] = Tensor::new(input.shape().to_vec(), x.to_vec());
            eval(&ts, Some(&probe)).0
        });
        for (&i, &n) in idx.iter().zip(&numeric) {
            let a = analytic.data()[i];
            assert!(relative_error(a, n, 1e-6) < 1e-6, "input {which} index {i}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng, 0.2, 1.5);
    let b = random(&[2, 3], &mut rng, 0.2, 1.5);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check(vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![a.clone()], |g, v| g.ln(v[0]));
    let signed = random(&[2, 3], &mut rng, -2.0, 2.0);
    check(vec![signed.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![signed.clone()], |g, v| g.silu(v[0]));
    check(vec![signed.clone()], |g, v| g.sum(v[0]));
    check(vec![signed], |g, v| g.mean(v[0]));
}

#[test]
fn abs_away_from_the_kink() {
    let t = Tensor::new(vec![4], vec![-0.5, 0.25, 1.0, -2.0]);
    check(vec![t], |g, v| g.abs(v[0]));
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let x = random(&[2, 3, 6, 6], &mut rng, -1.0, 1.0);
        let w = random(&[4, 3, k, k], &mut rng, -0.5, 0.5);
        let b = random(&[4], &mut rng, -0.1, 0.1);
        check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
    let y = random(&[2, 1, 3, 3], &mut rng, -1.0, 1.0);
    check(vec![x.clone()], |g, v| g.upsample2x(v[0]));
    check(vec![x.clone(), y], |g, v| g.concat_channels(&[v[0], v[1]]));
    check(vec![x.clone()], |g, v| g.global_avg_pool(v[0]));
    let wide = random(&[1, 2, 5, 7], &mut rng, -1.0, 1.0);
    check(vec![wide.clone()], |g, v| g.blur(v[0], &[0.25, 0.5, 0.25], true));
    check(vec![wide], |g, v| g.blur(v[0], &[0.1, 0.2, 0.4, 0.3], false));
    check(vec![x], |g, v| g.reshape(v[0], &[2, 18]));
}

#[test]
fn row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4], &mut rng, -1.0, 1.0);
    let w = random(&[5, 4], &mut rng, -1.0, 1.0);
    let b = random(&[5], &mut rng, -1.0, 1.0);
    check(vec![x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(vec![x.clone()], |g, v| g.normalize_rows(v[0]));
    check(vec![x.clone(), w], |g, v| g.matmul_nt(v[0], v[1]));
    check(vec![x.clone()], |g, v| g.softmax_rows(v[0]));
    check(vec![x.clone()], |g, v| g.log_softmax_rows(v[0]));
    check(vec![x], |g, v| g.gather(v[0], &[1, 0, 3]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]));
    let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
    let p = g.mul(a, c);
    let s = g.sum(p);
    let grads = g.backward(s);
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn shared_inputs_accumulate() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(Tensor::new(vec![1], vec![3.0]));
    let sq = g.mul(a, a);
    let s = g.add(sq, a);
    let loss = g.sum(s);
    let grads = g.backward(loss);
    assert_eq!(grads.get(a).unwrap().data(), &[7.0]);
}
