use haicomm::ndtensor::{gradcheck, Graph, Rng, Tensor, Value};
use haicomm::Result;
use proptest::prelude::*;

const OPS: [&str; 19] = [
    "add", "add_row", "sub", "mul", "mul_row", "scale", "matmul", "linear", "transpose", "reshape", "softmax",
    "layer_norm", "gelu", "concat0", "concat1", "narrow", "gather", "mse", "bce",
];

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, v: Value, w: &Tensor<f64>) -> Result<Value> {
    let w = g.constant(w.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn max_rel_err(op: &str, r: usize, c: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 0);
    let k = 1 + (seed as usize % 3);
    let shapes: Vec<Vec<usize>> = match op {
        "add" | "sub" | "mul" | "mse" => vec![vec![r, c], vec![r, c]],
        "add_row" | "mul_row" => vec![vec![r, c], vec![c]],
        "matmul" => vec![vec![r, c], vec![c, k]],
        "linear" => vec![vec![r, c], vec![c, k], vec![k]],
        "layer_norm" => vec![vec![r, c + 1], vec![c + 1], vec![c + 1]],
        "concat0" => vec![vec![r, c], vec![k, c]],
        "concat1" => vec![vec![r, c], vec![r, k]],
        "bce" => vec![vec![r, 2]],
        _ => vec![vec![r, c]],
    };
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
    let start = rng.below(c);
    let len = 1 + rng.below(c - start);
    let idx: Vec<usize> = (0..r + 1).map(|_| rng.below(r)).collect();
    let targets: Vec<u8> = (0..r).map(|_| rng.bernoulli(0.5) as u8).collect();
    let alpha = rng.uniform_in(-2.0, 2.0);

    let f = |g: &mut Graph<f64>, p: &[Value]| -> Result<Value> {
        let y = match op {
            "add" | "add_row" => g.add(p[0], p[1])?,
            "sub" => g.sub(p[0], p[1])?,
            "mul" | "mul_row" => g.mul(p[0], p[1])?,
            "scale" => g.scale(p[0], alpha),
            "matmul" => g.matmul(p[0], p[1])?,
            "linear" => g.linear(p[0], p[1], Some(p[2]))?,
            "transpose" => g.transpose(p[0])?,
            "reshape" => g.reshape(p[0], &[c, r])?,
            "softmax" => g.softmax(p[0]),
            "layer_norm" => g.layer_norm(p[0], p[1], p[2], 1e-5)?,
            "gelu" => g.gelu(p[0]),
            "concat0" => g.concat(&[p[0], p[1]], 0)?,
            "concat1" => g.concat(&[p[0], p[1]], 1)?,
            "narrow" => g.narrow(p[0], 1, start, len)?,
            "gather" => g.gather(p[0], &idx)?,
            "mse" => return g.mse_loss(p[0], p[1]),
            "bce" => {
                let s = g.softmax(p[0]);
                let q = g.narrow(s, 1, 1, 1)?;
                return g.bce_loss(q, &targets);
            }
            _ => unreachable!(),
        };
        let shape = g.shape(y).to_vec();
        let wt = random(&mut Rng::new(seed, 3), &shape, 1.0);
        weighted_sum(g, y, &wt)
    };
    gradcheck::check(f, &inputs, 1e-5).unwrap().max_rel_err
}

/// Pre-norm single-head attention with a residual and GELU.
fn attention_err(t: usize, d: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 9);
    let inputs = vec![
        random(&mut rng, &[t, d], 1.0),
        random(&mut rng, &[d, 3 * d], 0.8),
        random(&mut rng, &[d], 1.0),
        random(&mut rng, &[d], 1.0),
    ];
    let wt = random(&mut rng, &[t, d], 1.0);
    let f = |g: &mut Graph<f64>, p: &[Value]| -> Result<Value> {
        let h = g.layer_norm(p[0], p[2], p[3], 1e-5)?;
        let qkv = g.linear(h, p[1], None)?;
        let q = g.narrow(qkv, 1, 0, d)?;
        let k = g.narrow(qkv, 1, d, d)?;
        let v = g.narrow(qkv, 1, 2 * d, d)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax(s);
        let o = g.matmul(a, v)?;
        let o = g.add(o, p[0])?;
        let o = g.gelu(o);
        weighted_sum(g, o, &wt)
    };
    gradcheck::check(f, &inputs, 1e-5).unwrap().max_rel_err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn primitives_match_central_differences(op in 0..OPS.len(), r in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
        let e = max_rel_err(OPS[op], r, c, seed);
        prop_assert!(e <= 1e-5, "{} [{r}, {c}] seed {seed}: rel err {e:.3e}", OPS[op]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_block_matches_central_differences(t in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let e = attention_err(t, d, seed);
        prop_assert!(e <= 1e-4, "attention [{t}, {d}] seed {seed}: rel err {e:.3e}");
    }
}

#[test]
fn product_gradient_has_closed_form() {
    let mut rng = Rng::new(11, 0);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let mut g = Graph::new();
    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let ga = g.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    let f = |g: &mut Graph<f64>, p: &[Value]| -> Result<Value> {
        let y = g.matmul(p[0], p[1])?;
        Ok(g.sum(y))
    };
    assert!(gradcheck::check(f, &[a.clone(), b.clone()], 1e-5).unwrap().max_rel_err <= 1e-6);

    let c = random(&mut rng, &[3, 4], 1.0);
    let mut g = Graph::new();
    let (va, vc) = (g.param(a.clone()), g.param(c.clone()));
    let y = g.mul(va, vc).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(va).unwrap().data(), c.data());
}
