use looped_lm::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Expr = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest violation of `|tape - numeric| <= 1e-6 + 1e-3·max(|tape|, |numeric|)` over
/// every input element, returned as the excess over that bound (<= 0 means pass).
fn gradient_excess(inputs: &[Tensor<f64>], expr: &Expr) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = expr(&mut g, &vars);
    g.backward(out).unwrap();
    let tape: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))).collect();

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = expr(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let h = 1e-5;
    let mut worst = f64::NEG_INFINITY;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = tape[k].data()[i];
            let bound = 1e-6 + 1e-3 * numeric.abs().max(exact.abs());
            worst = worst.max((numeric - exact).abs() - bound);
        }
    }
    worst
}

fn check(seed: u64, shapes: &[&[usize]], expr: &Expr) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
    gradient_excess(&inputs, expr)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_and_broadcast(seed in any::<u64>()) {
        let e = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.mul(a, v[2]).unwrap();
            let c = g.sub(b, v[0]).unwrap();
            let d = g.silu(c);
            let e = g.gelu(d);
            let f = g.add_scalar(e, 0.3);
            let f = g.scale(f, -1.7);
            let f = g.mul(f, f).unwrap();
            g.mean(f)
        };
        prop_assert!(check(seed, &[&[2, 3, 4], &[4], &[3, 1]], &e) <= 0.0);
    }

    #[test]
    fn matmul_linear_and_norm(seed in any::<u64>()) {
        let e = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = g.rmsnorm(y, 1e-5).unwrap();
            let z = g.matmul_t(y, v[3]).unwrap();
            let z = g.softmax_lastdim(z);
            let w = g.matmul(v[4], z).unwrap();
            let s = g.sum(w);
            g.scale(s, 0.1)
        };
        prop_assert!(check(seed, &[&[2, 3, 5], &[5, 4], &[4], &[6, 4], &[2, 2, 3]], &e) <= 0.0);
    }

    #[test]
    fn losses(seed in any::<u64>()) {
        let targets = [0usize, 4, 2, 3, 1, 4];
        let e = move |g: &mut Graph<f64>, v: &[Var]| {
            let ce = g.cross_entropy(v[0], &targets).unwrap();
            let kl = g.reverse_kl(v[0], v[1]).unwrap();
            let mse = g.mse(v[0], v[1]).unwrap();
            let s = g.add(ce, kl).unwrap();
            g.add(s, mse).unwrap()
        };
        prop_assert!(check(seed, &[&[2, 3, 5], &[2, 3, 5]], &e) <= 0.0);
    }

    #[test]
    fn views_and_gather(seed in any::<u64>()) {
        let ids = [2usize, 0, 2, 1, 3, 2];
        let e = move |g: &mut Graph<f64>, v: &[Var]| {
            let rows = g.gather_rows(v[0], &ids, &[2, 3]).unwrap();
            let left = g.narrow_lastdim(rows, 1, 2).unwrap();
            let right = g.narrow_lastdim(rows, 3, 2).unwrap();
            let p = g.mul(left, right).unwrap();
            let r = g.reshape(p, &[3, 4]).unwrap();
            let r = g.mul(r, r).unwrap();
            g.sum(r)
        };
        prop_assert!(check(seed, &[&[4, 5]], &e) <= 0.0);
    }

    #[test]
    fn causal_attention_gradients(seed in any::<u64>()) {
        let e = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.causal_attention(v[0], 2).unwrap();
            let w = g.mul(a, v[1]).unwrap();
            g.sum(w)
        };
        prop_assert!(check(seed, &[&[2, 5, 12], &[2, 5, 4]], &e) <= 0.0);
    }

    #[test]
    fn softmax_rows_normalize_and_shift(seed in any::<u64>(), shift in -50i32..=50, real_shift in -50.0f64..50.0) {
        fn softmax<T: looped_lm::Scalar>(t: Tensor<T>) -> Tensor<T> {
            let mut g = Graph::inference();
            let v = g.leaf(t, false);
            let y = g.softmax_lastdim(v);
            g.value(y).clone()
        }
        // Inputs on a 1/64 grid so that x + shift is exact in f32.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::new(vec![3, 7], (0..21).map(|_| rng.random_range(-1280i32..1280) as f32 / 64.0).collect()).unwrap();
        let y = softmax(x.clone());
        for row in y.data().chunks(7) {
            prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let shifted = softmax(x.map(|v| v + shift as f32));
        prop_assert!(shifted.max_abs_diff(&y) <= 1e-6);

        let x64 = Tensor::<f64>::new(vec![3, 7], (0..21).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let y64 = softmax(x64.clone());
        prop_assert!(softmax(x64.map(|v| v + real_shift)).max_abs_diff(&y64) <= 1e-6);
    }
}

#[test]
fn stop_gradient_is_transparent_and_detached() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap(), true);
    let y = g.gelu(x);
    let frozen = g.stop_gradient(y);
    assert_eq!(g.value(frozen).data(), g.value(y).data());
    assert!(!g.requires_grad(frozen));
    let loss = g.mse(frozen, x).unwrap();
    g.backward(loss).unwrap();
    // Only the direct path into x carries gradient; y's subgraph receives nothing.
    assert!(g.grad(y).is_none());
    assert!(g.grad(frozen).is_none());
    let expected: Vec<f32> = g
        .value(x)
        .data()
        .iter()
        .zip(g.value(frozen).data())
        .map(|(&a, &b)| 2.0 * (a - b) / 12.0)
        .collect();
    for (got, want) in g.grad(x).unwrap().data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-7);
    }
}

#[test]
fn shared_inputs_accumulate_once_per_use() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    // A second sweep replaces rather than doubles the gradients.
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn reset_keeps_parameters() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let w2 = g.mul(w, w).unwrap();
    let loss = g.sum(w2);
    g.backward_into(loss, &mut store).unwrap();
    g.reset();
    assert!(g.is_empty());
    assert_eq!(store.value(id).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(store.grad(id).data(), &[2.0, 4.0, 6.0, 8.0]);
    // Gradients accumulate across graphs until zeroed.
    let w = g.param(&store, id);
    let loss = g.sum(w);
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(id).data(), &[3.0, 5.0, 7.0, 9.0]);
    store.zero_grads();
    assert_eq!(store.grad(id).data(), &[0.0; 4]);
}

#[test]
fn cross_entropy_landmarks() {
    let mut g = Graph::<f64>::new();
    let uniform = g.leaf(Tensor::zeros([1, 4]), false);
    let ce = g.cross_entropy(uniform, &[2]).unwrap();
    assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    let confident = g.leaf(Tensor::from_f64([1, 3], &[20.0, 0.0, 0.0]).unwrap(), false);
    let ce = g.cross_entropy(confident, &[0]).unwrap();
    assert!(g.value(ce).item().unwrap() < 1e-6);
    assert!(g.cross_entropy(confident, &[3]).is_err());
    assert!(g.cross_entropy(confident, &[0, 1]).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::zeros([2, 3]), true);
    let b = g.leaf(Tensor::zeros([4, 2]), true);
    assert!(g.matmul(a, b).is_err());
    assert!(g.add(a, b).is_err());
    assert!(g.mse(a, b).is_err());
    assert!(g.narrow_lastdim(a, 2, 2).is_err());
    assert!(g.reshape(a, &[5]).is_err());
    let s = g.sum(a);
    assert!(g.backward(a).is_err());
    assert!(g.backward(s).is_ok());
}

#[test]
fn batched_matmul_broadcasts_batch_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&[3, 2, 4], &mut rng);
    let b = random_tensor(&[4, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.leaf(a.clone(), false), g.leaf(b.clone(), false));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[3, 2, 5]);
    for batch in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[batch * 8 + i * 4 + k] * b.data()[k * 5 + j]).sum();
                assert!((g.value(c).data()[batch * 10 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
    assert_eq!(g.flops(), 2 * 3 * 2 * 5 * 4);
}
