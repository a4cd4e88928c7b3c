//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only ever drives the forward pass: it perturbs one scalar
//! parameter component at a time and differences the loss, so it stays
//! independent of the backward implementation it is checking.

use crate::error::Result;
use crate::tensor::{Graph, ParameterStore, Tensor, Value};

/// One gradient comparison that exceeded tolerance (or the worst overall).
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    pub worst: Option<GradMismatch>,
    pub worst_ratio: f64,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central finite differences of `loss_fn` w.r.t. every parameter in the
/// store: `(f(w + h) - f(w - h)) / 2h` per scalar component.
pub fn finite_difference<F>(
    store: &mut ParameterStore,
    h: f64,
    loss_fn: &mut F,
) -> Result<Vec<(String, Tensor)>>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let numel = store.get(&name).unwrap().numel();
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut grad = vec![0.0; numel];
        for i in 0..numel {
            store.nudge(&name, i, h)?;
            let up = loss_fn(store)?;
            store.nudge(&name, i, -2.0 * h)?;
            let down = loss_fn(store)?;
            store.nudge(&name, i, h)?;
            grad[i] = (up - down) / (2.0 * h);
        }
        out.push((name, Tensor::new(shape, grad)?));
    }
    Ok(out)
}

/// Compare the backward pass against finite differences for every
/// parameter touched by `build`.
///
/// A component passes when `|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)`.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    h: f64,
    rtol: f64,
    atol: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Value>,
{
    // analytic pass
    let analytic: Vec<(String, Tensor)> = {
        let mut graph = Graph::training(store);
        let loss = build(&mut graph)?;
        graph.backward(loss)?;
        graph.collect_grads()
    };

    // numeric pass, forward evaluations only
    let mut eval = |store: &mut ParameterStore| -> Result<f64> {
        let mut graph = Graph::training(store);
        let loss = build(&mut graph)?;
        Ok(graph.tape.value(loss).data()[0])
    };
    let numeric = finite_difference(store, h, &mut eval)?;

    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        worst: None,
        worst_ratio: 0.0,
    };
    for (name, a) in &analytic {
        let n = &numeric
            .iter()
            .find(|(nn, _)| nn == name)
            .expect("finite_difference covers every store parameter")
            .1;
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let tol = atol + rtol * av.abs().max(nv.abs());
            let ratio = (av - nv).abs() / tol;
            if ratio > report.worst_ratio {
                report.worst_ratio = ratio;
                report.worst = Some(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: av,
                    numeric: nv,
                });
            }
            if ratio > 1.0 {
                report.failures.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: av,
                    numeric: nv,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const RTOL: f64 = 1e-6;
    const ATOL: f64 = 1e-9;

    fn random_store(seed: u64, entries: &[(&str, &[usize])]) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.set(name, Tensor::new(shape.to_vec(), data).unwrap());
        }
        store
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut store = random_store(11, &[("a", &[3, 4]), ("b", &[4, 2])]);
        let report = check_gradients(&mut store, H, RTOL, ATOL, |g| {
            let a = g.param("a", &[3, 4], Init::Const(0.0))?;
            let b = g.param("b", &[4, 2], Init::Const(0.0))?;
            let c = g.tape.matmul(a, b)?;
            Ok(g.tape.sum(c))
        })
        .unwrap();
        assert!(report.ok(), "worst: {:?}", report.worst);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut store = random_store(12, &[("x", &[2, 5])]);
        let report = check_gradients(&mut store, H, RTOL, ATOL, |g| {
            let x = g.param("x", &[2, 5], Init::Const(0.0))?;
            let s = g.tape.softmax(x, 1)?;
            // weight the entries so the gradient is not identically zero
            let w = g.constant(Tensor::new(vec![2, 5], (0..10).map(|i| i as f64).collect())?);
            let p = g.tape.mul(s, w)?;
            Ok(g.tape.sum(p))
        })
        .unwrap();
        assert!(report.ok(), "worst: {:?}", report.worst);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut store = ParameterStore::new(0);
        store.set("x", Tensor::scalar(0.0));
        let analytic = {
            let mut graph = Graph::training(&mut store);
            let x = graph.param("x", &[1, 1], Init::Const(0.0)).unwrap();
            let s = graph.tape.sigmoid(x);
            let loss = graph.tape.sum(s);
            graph.backward(loss).unwrap();
            graph.collect_grads()[0].1.data()[0]
        };
        assert!((analytic - 0.25).abs() < 1e-12);

        let numeric = finite_difference(&mut store, H, &mut |store| {
            let mut graph = Graph::training(store);
            let x = graph.param("x", &[1, 1], Init::Const(0.0))?;
            let s = graph.tape.sigmoid(x);
            let loss = graph.tape.sum(s);
            Ok(graph.tape.value(loss).data()[0])
        })
        .unwrap();
        assert!((numeric[0].1.data()[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn concat_routes_gradient_slices() {
        let mut store = random_store(13, &[("a", &[2, 3]), ("b", &[2, 2])]);
        let report = check_gradients(&mut store, H, RTOL, ATOL, |g| {
            let a = g.param("a", &[2, 3], Init::Const(0.0))?;
            let b = g.param("b", &[2, 2], Init::Const(0.0))?;
            let c = g.tape.concat(&[a, b], 1)?;
            let w = g.constant(Tensor::new(vec![2, 5], (0..10).map(|i| (i as f64) * 0.3).collect())?);
            let p = g.tape.mul(c, w)?;
            Ok(g.tape.sum(p))
        })
        .unwrap();
        assert!(report.ok(), "worst: {:?}", report.worst);
    }

    #[test]
    fn every_op_matches_finite_differences_across_seeds() {
        // randomized shapes and values, one composite graph per seed
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize);
            let n = rng.gen_range(2..5usize);
            let mut store = ParameterStore::new(seed);
            let fill = |rng: &mut ChaCha8Rng, shape: &[usize]| {
                let numel: usize = shape.iter().product();
                Tensor::new(
                    shape.to_vec(),
                    (0..numel).map(|_| rng.gen_range(-0.9..0.9)).collect(),
                )
                .unwrap()
            };
            store.set("a", fill(&mut rng, &[m, k]));
            store.set("b", fill(&mut rng, &[k, n]));
            store.set("bias", fill(&mut rng, &[n]));
            store.set("gamma", fill(&mut rng, &[n]));
            store.set("beta", fill(&mut rng, &[n]));

            let build = |g: &mut Graph| -> Result<Value> {
                let a = g.param("a", &[m, k], Init::Const(0.0))?;
                let b = g.param("b", &[k, n], Init::Const(0.0))?;
                let bias = g.param("bias", &[n], Init::Const(0.0))?;
                let gamma = g.param("gamma", &[n], Init::Const(0.0))?;
                let beta = g.param("beta", &[n], Init::Const(0.0))?;

                let mm = g.tape.matmul(a, b)?;
                let biased = g.tape.add_bias(mm, bias)?;
                let ln = g.tape.layer_norm(biased, gamma, beta, 1e-5)?;
                let th = g.tape.tanh(ln);
                let sg = g.tape.sigmoid(th);
                let sm = g.tape.softmax(sg, 1)?;
                let cl = g.tape.clamp_min(sm, 1e-10);
                let lg = g.tape.log(cl)?;
                let first = g.tape.narrow(lg, 1, 0, 1)?;
                let rest = g.tape.narrow(lg, 1, 1, n - 1)?;
                let joined = g.tape.concat(&[first, rest], 1)?;
                let tr = g.tape.transpose(joined)?;
                let sc = g.tape.scale(tr, 0.7);
                Ok(g.tape.mean(sc))
            };
            let report = check_gradients(&mut store, H, 1e-4, 1e-8, build).unwrap();
            assert!(report.ok(), "seed {seed} worst: {:?}", report.worst);
        }
    }
}
