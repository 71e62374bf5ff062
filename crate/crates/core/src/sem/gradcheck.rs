//! Finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{Gradients, Tensor};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, 0 when both are zero.
    pub rel_error: f64,
}

/// Compare analytic gradients against central differences for every entry
/// of every parameter block. `loss` must evaluate the same scalar the
/// analytic pass differentiated.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    names: &[String],
    analytic: &Gradients,
    step: f64,
    mut loss: F,
) -> Result<Vec<BlockCheck>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (b, name) in names.iter().enumerate().take(params.len()) {
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        let mut max_d = 0.0f64;
        for k in 0..params[b].len() {
            let orig = work[b].data[k];
            work[b].data[k] = orig + step;
            let lp = loss(&work)?;
            work[b].data[k] = orig - step;
            let lm = loss(&work)?;
            work[b].data[k] = orig;
            let num = (lp - lm) / (2.0 * step);
            let ana = analytic.tensors[b].data[k];
            max_a = max_a.max(ana.abs());
            max_n = max_n.max(num.abs());
            max_d = max_d.max((ana - num).abs());
        }
        let denom = max_a.max(max_n);
        out.push(BlockCheck {
            name: name.clone(),
            max_abs_analytic: max_a,
            max_abs_numeric: max_n,
            rel_error: if denom == 0.0 { 0.0 } else { max_d / denom },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::tape::{ParamId, Tape};

    fn record(p: &[Tensor]) -> (Tape<'_>, crate::sem::tape::Var) {
        let mut t = Tape::new(p);
        let x = t.input(vec![1.0, 2.0]);
        let y = t.matvec(ParamId(0), x);
        let b = t.param(ParamId(1));
        let z = t.add(y, b);
        let s = t.square(z);
        let ones = t.input(vec![1.0, 1.0]);
        let c = t.cosine(s, ones);
        (t, c)
    }

    #[test]
    fn quadratic_block_passes() {
        let params = vec![
            Tensor::from_vec(2, 2, vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
            Tensor::zeros(2, 1),
        ];
        let (tape, loss) = record(&params);
        let g = tape.backward(loss).unwrap();
        let names = vec!["w".to_string(), "b".to_string()];
        let res = finite_diff_check(&params, &names, &g, DEFAULT_STEP, |p| {
            let (t, c) = record(p);
            Ok(t.scalar(c))
        })
        .unwrap();
        for r in &res {
            assert!(r.rel_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_detected_and_zero_block_is_zero() {
        let params = vec![
            Tensor::from_vec(1, 1, vec![2.0]).unwrap(),
            Tensor::zeros(1, 1),
        ];
        let mut g = Gradients::zeros_like(&params);
        g.tensors[0].data[0] = 1.0; // true derivative of w² at 2 is 4
        let names = vec!["w".into(), "unused".into()];
        let res = finite_diff_check(&params, &names, &g, DEFAULT_STEP, |p| {
            Ok(p[0].data[0].powi(2))
        })
        .unwrap();
        assert!(res[0].rel_error > 0.5);
        assert_eq!(res[1].rel_error, 0.0);
    }
}
