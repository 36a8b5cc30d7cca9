//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Relative-error denominators never fall below this.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Analytic and numeric value of every checked coordinate, in order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Number of coordinates violating `|a - n| <= atol + rtol * max(|a|, |n|)`.
    pub fn violations(&self, rtol: f64, atol: f64) -> usize {
        self.pairs
            .iter()
            .filter(|(a, n)| (a - n).abs() > atol + rtol * a.abs().max(n.abs()))
            .count()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Reverse-mode gradients of the scalar returned by `f` for each of `ids`.
pub fn analytic_gradients<F>(store: &ParamStore, ids: &[ParamId], f: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut scratch = store.clone();
    scratch.zero_grad();
    g.accumulate_param_grads(&grads, &mut scratch);
    Ok(ids.iter().map(|&id| scratch.get(id).grad.data().to_vec()).collect())
}

/// Compares `analytic` against central differences of `f`, one coordinate at
/// a time. `store` is restored before returning.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Vec<f64>],
    eps: f64,
    f: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.value(v).data()[0])
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        pairs: Vec::new(),
    };
    for (&id, grad) in ids.iter().zip(analytic) {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let e = rel_err(grad[i], numeric);
            report.coordinates += 1;
            report.pairs.push((grad[i], numeric));
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Checks every coordinate of `ids` (all parameters when empty).
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = if ids.is_empty() {
        store.ids().collect()
    } else {
        ids.to_vec()
    };
    let analytic = analytic_gradients(store, &ids, &mut f)?;
    compare_gradients(store, &ids, &analytic, eps, &mut f)
}

/// Runs [`grad_check`] over every differentiable primitive on small random
/// inputs. Each loss is `sum(op(..) ⊙ R)` for a fixed random `R`, so every
/// output coordinate contributes.
pub fn check_primitives(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    // Inputs for kinked activations are kept away from zero.
    let away = |t: Tensor| t.map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x });

    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[4, 5], &mut rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bmm", vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[2, 4, 2], &mut rng)], Box::new(|g, v| g.bmm(v[0], v[1], false))),
        ("bmm_trans_b", vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[2, 5, 4], &mut rng)], Box::new(|g, v| g.bmm(v[0], v[1], true))),
        ("add", vec![rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_broadcast", vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[3, 4], &mut rng)], Box::new(|g, v| g.add_broadcast(v[0], v[1]))),
        ("scale", vec![rand_t(&[3, 4], &mut rng)], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("transpose", vec![rand_t(&[2, 3, 4], &mut rng)], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape", vec![rand_t(&[2, 6], &mut rng)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("split_heads", vec![rand_t(&[2, 3, 4], &mut rng)], Box::new(|g, v| g.split_heads(v[0], 2))),
        ("merge_heads", vec![rand_t(&[4, 3, 2], &mut rng)], Box::new(|g, v| g.merge_heads(v[0], 2))),
        ("concat", vec![rand_t(&[3, 2], &mut rng), rand_t(&[3, 3], &mut rng)], Box::new(|g, v| g.concat(&[v[0], v[1]]))),
        ("slice_last", vec![rand_t(&[3, 5], &mut rng)], Box::new(|g, v| g.slice_last(v[0], 1, 3))),
        ("gather", vec![rand_t(&[4, 3], &mut rng)], Box::new(|g, v| g.gather(v[0], &[2, 0, 2, 3]))),
        ("outer_add", vec![rand_t(&[2, 3], &mut rng), rand_t(&[2, 4], &mut rng)], Box::new(|g, v| g.outer_add(v[0], v[1]))),
        ("softmax", vec![rand_t(&[3, 5], &mut rng)], Box::new(|g, v| g.softmax(v[0]))),
        (
            "masked_softmax",
            vec![rand_t(&[2, 3, 3], &mut rng)],
            Box::new(|g, v| {
                let ninf = f64::NEG_INFINITY;
                let mask = g.constant(Tensor::new(vec![3, 3], vec![0.0, ninf, ninf, 0.0, 0.0, ninf, 0.0, 0.0, 0.0])?);
                let s = g.add_broadcast(v[0], mask)?;
                g.softmax(s)
            }),
        ),
        (
            "layer_norm",
            vec![rand_t(&[3, 5], &mut rng), rand_t(&[5], &mut rng), rand_t(&[5], &mut rng)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("relu", vec![away(rand_t(&[3, 4], &mut rng))], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("leaky_relu", vec![away(rand_t(&[3, 4], &mut rng))], Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2)))),
        ("dropout_p0", vec![rand_t(&[3, 4], &mut rng)], Box::new(|g, v| g.dropout(v[0], 0.0))),
        (
            "cross_entropy",
            vec![rand_t(&[4, 5], &mut rng)],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 4, 2], Some(0))),
        ),
        ("sum", vec![rand_t(&[3, 4], &mut rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("segment_softmax", vec![rand_t(&[6], &mut rng)], Box::new(|g, v| g.segment_softmax(v[0], &[0, 1, 4, 6]))),
        ("mul_rows", vec![rand_t(&[4, 3], &mut rng), rand_t(&[4], &mut rng)], Box::new(|g, v| g.mul_rows(v[0], v[1]))),
        ("index_add", vec![rand_t(&[5, 3], &mut rng)], Box::new(|g, v| g.index_add(v[0], &[2, 0, 2, 1, 2], 4))),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, build) in cases {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("{name}.in{i}"), t))
            .collect();
        // probe the output shape once to size the random projection
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
            let y = build(&mut g, &vars)?;
            g.value(y).shape().to_vec()
        };
        let proj = rand_t(&probe, &mut rng);
        let report = grad_check(&mut store, &ids, eps, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = build(g, &vars)?;
            let r = g.constant(proj.clone());
            let w = g.mul(y, r)?;
            Ok(g.sum(w))
        })?;
        out.push((name, report));
    }
    Ok(out)
}
