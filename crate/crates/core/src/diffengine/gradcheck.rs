use super::{Graph, GraphError, Tensor, Var};

/// Comparison of analytic and central-difference gradients for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    /// `max |analytic - numeric|` over entries.
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the larger of the two gradients' max magnitudes
    /// (floored at `1e-8` so an all-zero gradient reports an absolute error).
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

const SCALE_FLOOR: f64 = 1e-8;

/// Checks the reverse pass of `f` against central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar node. It must be deterministic: any noise it uses has to
/// be captured up front.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, GraphError>,
{
    let mut graph = Graph::new();
    let vars = params
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| graph.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let vars = probe
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(GraphError::Shape("gradient check target must be scalar".into()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(GraphError::NonFinite("objective during finite-difference probe".into()));
        }
        Ok(v)
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut numeric = Vec::with_capacity(param.numel());
        for e in 0..param.numel() {
            let base = param.data()[e];
            probe[pi] = perturbed(param, e, base + step);
            let plus = eval(&probe)?;
            probe[pi] = perturbed(param, e, base - step);
            let minus = eval(&probe)?;
            numeric.push((plus - minus) / (2.0 * step));
        }
        probe[pi] = param.clone();

        let an = &analytic[pi];
        let max_abs_err = an.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = an
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(SCALE_FLOOR, f64::max);
        checks.push(ParamCheck {
            max_abs_err,
            max_rel_err: max_abs_err / scale,
            analytic: an.clone(),
            numeric,
        });
    }
    Ok(GradCheckReport { params: checks, tol })
}

fn perturbed(t: &Tensor, index: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.params[0].analytic, vec![6.0]);
        assert!((report.params[0].numeric[0] - 6.0).abs() < 1e-8);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_objective() {
        let x = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let z = g.mul_scalar(v[0], 0.0)?;
                let s = g.sum_all(z)?;
                g.add_scalar(s, 4.0)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        for p in &report.params {
            assert!(p.analytic.iter().all(|v| v.abs() < 1e-8));
            assert!(p.numeric.iter().all(|v| v.abs() < 1e-8));
        }
        assert!(report.passed());
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // log(x) probed across zero
        let x = Tensor::vector(vec![1e-6]).unwrap();
        let res = finite_diff_check(
            |g, v| {
                let l = g.log(v[0])?;
                g.sum_all(l)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(res.is_err());
    }
}
