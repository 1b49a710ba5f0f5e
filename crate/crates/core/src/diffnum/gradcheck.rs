use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh graph and one parameter handle per tensor in
/// `params` and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = p.data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let plus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[c] = orig - opts.eps;
            let minus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::rc::Rc;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_fn(&[6], |i| i as f64 - 2.5);
        let x = Tensor::from_fn(&[6], |i| (i as f64).sqrt());
        let report = grad_check(&[w], &GradCheckOptions::default(), |g, v| {
            let xc = g.constant(x.clone());
            let p = g.mul(v[0], xc)?;
            let s = g.scale(p, 3.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn matmul_matches_central_differences() {
        let mut rng = stream(11, "gradcheck", 0);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let report = grad_check(&[a, b], &GradCheckOptions::default(), |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let wc = g.constant(w.clone());
            let m2 = g.mul(m, wc)?;
            let sq = g.square(m2)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 35);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_block_matches_central_differences() {
        let mut rng = stream(12, "gradcheck", 1);
        let (t, d) = (5, 4);
        let x = Tensor::randn(&[2, t, d], 1.0, &mut rng);
        let wq = Tensor::randn(&[d, d], 0.5, &mut rng);
        let wk = Tensor::randn(&[d, d], 0.5, &mut rng);
        let wv = Tensor::randn(&[d, d], 0.5, &mut rng);
        let target = Tensor::randn(&[2, t, d], 1.0, &mut rng);
        let causal: Rc<Vec<bool>> = Rc::new((0..t * t).map(|i| i % t > i / t).collect());
        let report = grad_check(&[x, wq, wk, wv], &GradCheckOptions::default(), |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let val = g.matmul(v[0], v[3])?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, 0.5)?;
            let s = g.masked_fill(s, causal.clone(), -1e30)?;
            let a = g.softmax(s)?;
            let o = g.matmul(a, val)?;
            let o = g.add(o, v[0])?;
            let o = g.layer_norm(o, 1e-5)?;
            let tc = g.constant(target.clone());
            let diff = g.sub(o, tc)?;
            let sq = g.square(diff)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn elementwise_ops_match_central_differences() {
        let mut rng = stream(13, "gradcheck", 2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let table = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let report = grad_check(&[x, table], &GradCheckOptions::default(), |g, v| {
            let e = g.embedding(v[1], &[4, 0, 4])?;
            let a = g.add(v[0], e)?;
            let t = g.tanh(a)?;
            let sp = g.softplus(t)?;
            let ex = g.exp(sp)?;
            let l = g.log(ex)?;
            let c = g.concat(&[l, v[0]], 1)?;
            let s = g.slice(c, 1, 2, 5)?;
            let p = g.permute(s, &[1, 0])?;
            let r = g.reshape(p, &[15])?;
            let r = g.add_scalar(r, 0.3)?;
            let sq = g.square(r)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn coordinate_budget_is_respected() {
        let w = Tensor::zeros(&[100]);
        let opts = GradCheckOptions {
            max_coords: Some(7),
            ..Default::default()
        };
        let report = grad_check(&[w], &opts, |g, v| g.sum(v[0])).unwrap();
        assert_eq!(report.coords_checked, 7);
    }
}
