//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the reverse-mode rules it verifies.

use crate::error::Result;
use crate::nn::{Graph, Tensor, Var};

/// Outcome of one check: relative error `|a - n|_2 / max(|a|_2, |n|_2)`
/// over the concatenated gradients of all inputs.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

/// Checks `d f / d inputs` where `f` builds a scalar from leaf variables.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let orig = xs[i].data()[k];
            let h = 1e-4 * orig.abs().max(1.0);
            xs[i].data_mut()[k] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic).max(norm(&numeric));
    let rel_error = if denom == 0.0 { 0.0 } else { norm(&diff) / denom };
    Ok(GradCheck {
        rel_error,
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        grad_norm: norm(&analytic),
    })
}

/// Projects a tensor-valued node onto a scalar with fixed pseudo-random
/// weights, so every output coordinate contributes a distinct gradient.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut r = crate::rng::rng(seed);
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y = g.mul_const(x, std::rc::Rc::new(w))?;
    Ok(g.sum(y))
}

/// Checks parameter gradients of a scalar built from `store`. Compares
/// `samples` randomly chosen coordinates (all if `None`).
pub fn check_store<F>(
    store: &crate::nn::ParamStore,
    samples: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &crate::nn::ParamStore) -> Result<Var>,
{
    use rand::seq::index::sample;

    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    g.backward(out)?;
    g.accumulate_into(&mut work)?;

    let coords: Vec<(usize, usize)> = work
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.numel()).map(move |k| (i, k)))
        .collect();
    let picked: Vec<(usize, usize)> = match samples {
        Some(n) if n < coords.len() => sample(&mut crate::rng::rng(seed), coords.len(), n)
            .iter()
            .map(|i| coords[i])
            .collect(),
        _ => coords,
    };

    let eval = |s: &crate::nn::ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut analytic = Vec::with_capacity(picked.len());
    let mut numeric = Vec::with_capacity(picked.len());
    let mut probe = work.clone();
    for (pi, k) in picked {
        let p = probe.iter_mut().nth(pi).expect("index");
        analytic.push(p.grad.data()[k]);
        let orig = p.value.data()[k];
        let h = 1e-4 * orig.abs().max(1.0);
        p.value.data_mut()[k] = orig + h;
        let up = eval(&probe)?;
        probe.iter_mut().nth(pi).unwrap().value.data_mut()[k] = orig - h;
        let down = eval(&probe)?;
        probe.iter_mut().nth(pi).unwrap().value.data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic).max(norm(&numeric));
    Ok(GradCheck {
        rel_error: if denom == 0.0 { 0.0 } else { norm(&diff) / denom },
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        grad_norm: norm(&analytic),
    })
}

/// Worst relative error per kernel across `shapes` random shapes each.
pub fn kernel_suite(seed: u64, shapes: usize) -> Result<Vec<(&'static str, f64)>> {
    use rand::Rng;
    use std::rc::Rc;

    let mut r = crate::rng::rng(seed);
    let rand_t = |r: &mut crate::rng::Rng, shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.gen_range(-scale..scale)).collect(),
        )
        .expect("shape")
    };
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => results.push((name, e)),
    };

    for s in 0..shapes as u64 {
        let b = r.gen_range(1..3);
        let m = r.gen_range(1..5);
        let k = r.gen_range(2..6);
        let n = r.gen_range(1..5);

        let x = rand_t(&mut r, &[b, m, k], 1.0);
        let w = rand_t(&mut r, &[k, n], 1.0);
        let bias = rand_t(&mut r, &[n], 1.0);
        let c = check(&[x, w, bias], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            project(g, y, s)
        })?;
        record("linear", c.rel_error);

        let a = rand_t(&mut r, &[m, k], 1.0);
        let e = rand_t(&mut r, &[n + 1, k], 1.0);
        let c = check(&[a, e], |g, v| {
            let y = g.matmul_bt(v[0], v[1])?;
            project(g, y, s)
        })?;
        record("matmul_transposed", c.rel_error);

        let x = rand_t(&mut r, &[m, k + 1], 2.0);
        let gain = rand_t(&mut r, &[k + 1], 1.5);
        let lb = rand_t(&mut r, &[k + 1], 1.0);
        let c = check(&[x, gain, lb], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, s)
        })?;
        record("layer_norm", c.rel_error);

        let x = rand_t(&mut r, &[m * k + 1], 3.0);
        let c = check(&[x], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, s)
        })?;
        record("gelu", c.rel_error);

        let d = k;
        let dff = 4 * d;
        let ins = vec![
            rand_t(&mut r, &[m, d], 1.0),
            rand_t(&mut r, &[d, dff], 0.5),
            rand_t(&mut r, &[dff], 0.5),
            rand_t(&mut r, &[d, dff], 0.5),
            rand_t(&mut r, &[dff], 0.5),
            rand_t(&mut r, &[dff, d], 0.5),
            rand_t(&mut r, &[d], 0.5),
            rand_t(&mut r, &[d], 1.5),
            rand_t(&mut r, &[d], 0.5),
        ];
        let keep = Rc::new(crate::nn::kernels::dropout_mask(m * d, 0.25, s));
        let c = check(&ins, |g, v| {
            let a = g.matmul(v[0], v[1])?;
            let a = g.add_bias(a, v[2])?;
            let a = g.gelu(a);
            let bb = g.matmul(v[0], v[3])?;
            let bb = g.add_bias(bb, v[4])?;
            let y = g.mul(a, bb)?;
            let o = g.matmul(y, v[5])?;
            let o = g.add_bias(o, v[6])?;
            let o = g.mul_const(o, keep.clone())?;
            let res = g.add(o, v[0])?;
            let out = g.layer_norm(res, v[7], v[8])?;
            project(g, out, s)
        })?;
        record("geglu_ffn", c.rel_error);

        let h = r.gen_range(1..3);
        let sq = r.gen_range(1..5);
        let sk = r.gen_range(1..5);
        let dh = 2 * r.gen_range(1..3);
        let q = rand_t(&mut r, &[b, h, sq, dh], 1.0);
        let kk = rand_t(&mut r, &[b, h, sk, dh], 1.0);
        let vv = rand_t(&mut r, &[b, h, sk, dh + 1], 1.0);
        let mut mask: Vec<bool> = (0..b * sq * sk).map(|_| r.gen_bool(0.3)).collect();
        if s == 0 {
            // one fully forbidden row
            mask[..sk].iter_mut().for_each(|x| *x = true);
        }
        let c = check(&[q, kk, vv], |g, v| {
            let y = g.attention(v[0], v[1], v[2], &mask)?;
            project(g, y, s)
        })?;
        record("masked_attention", c.rel_error);

        let x = rand_t(&mut r, &[b, h, sq, dh], 1.0);
        let pos: Rc<Vec<usize>> = Rc::new((0..sq).map(|_| r.gen_range(0..50)).collect());
        let c = check(&[x], |g, v| {
            let y = g.rope(v[0], pos.clone())?;
            project(g, y, s)
        })?;
        record("rope", c.rel_error);

        let vocab = r.gen_range(3..8);
        let table = rand_t(&mut r, &[vocab, k], 1.0);
        let ids: Rc<Vec<usize>> = Rc::new((0..b * m).map(|_| r.gen_range(0..vocab)).collect());
        let c = check(&[table], |g, v| {
            let y = g.embedding(v[0], ids.clone(), &[b, m], true)?;
            project(g, y, s)
        })?;
        record("embedding", c.rel_error);

        let x = rand_t(&mut r, &[b, sq, h * dh], 1.0);
        let c = check(&[x], |g, v| {
            let y = g.split_heads(v[0], h)?;
            let y = g.gelu(y);
            let y = g.merge_heads(y)?;
            project(g, y, s)
        })?;
        record("split_merge_heads", c.rel_error);

        let p1 = rand_t(&mut r, &[b, 1, k], 1.0);
        let p2 = rand_t(&mut r, &[b, m, k], 1.0);
        let c = check(&[p1, p2], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.gelu(y);
            project(g, y, s)
        })?;
        record("concat", c.rel_error);

        let x = rand_t(&mut r, &[b, m, k], 1.0);
        let rows: Rc<Vec<usize>> = Rc::new((0..3).map(|_| r.gen_range(0..b * m)).collect());
        let valid: Rc<Vec<bool>> = Rc::new(
            (0..b * m)
                .map(|i| i % m == 0 || r.gen_bool(0.6))
                .collect(),
        );
        let c = check(&[x], |g, v| {
            let a = g.gather_rows(v[0], rows.clone())?;
            let pa = project(g, a, s)?;
            let p = g.mean_pool(v[0], valid.clone())?;
            let pp = project(g, p, s + 1)?;
            g.add(pa, pp)
        })?;
        record("gather_and_pool", c.rel_error);

        let x = rand_t(&mut r, &[m, k], 1.0);
        let sc = rand_t(&mut r, &[1], 1.0);
        let c = check(&[x, sc], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            project(g, y, s)
        })?;
        record("gate_scale", c.rel_error);

        let rows_n = r.gen_range(2..7);
        let classes = r.gen_range(2..9);
        let logits = rand_t(&mut r, &[rows_n, classes], 3.0);
        let targets: Rc<Vec<usize>> = Rc::new((0..rows_n).map(|_| r.gen_range(0..classes)).collect());
        let weights: Rc<Vec<f64>> = Rc::new(
            (0..rows_n)
                .map(|i| if i == 0 || r.gen_bool(0.7) { 1.0 } else { 0.0 })
                .collect(),
        );
        let c = check(&[logits], |g, v| {
            g.cross_entropy(v[0], targets.clone(), weights.clone())
        })?;
        record("cross_entropy", c.rel_error);
    }
    Ok(results)
}
