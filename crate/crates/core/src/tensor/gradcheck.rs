use rand::seq::index;
use rand::Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    /// Summarize coordinate comparisons; a non-finite comparison is an error.
    pub fn from_coords(coords: &[CoordCheck]) -> Result<Self> {
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            coords_checked: coords.len(),
            worst: None,
        };
        for c in coords {
            let rel = c.rel_err();
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at parameter {}, coordinate {}",
                    c.param, c.index
                )));
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((c.param, c.index));
            }
        }
        Ok(report)
    }
}

/// Analytic and central-difference derivative for one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    /// `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences on up to `samples` randomly chosen coordinates (all of them
/// when there are fewer).
///
/// The relative error per coordinate uses `max(|analytic|, |numeric|, 1e-8)`
/// as the denominator.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: Real, samples: usize, rng: &mut impl Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheckReport::from_coords(&grad_check_coords(f, params, eps, samples, rng)?)
}

/// The per-coordinate comparisons behind [`grad_check`], in coordinate order.
pub fn grad_check_coords<F>(
    f: F,
    params: &[Tensor],
    eps: Real,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CoordCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if loss.value().len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(g);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut coords: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        index::sample(rng, total, samples).into_vec()
    };
    coords.sort_unstable();

    let mut work: Vec<Tensor> = params.to_vec();
    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&mut g, &vars)?.value().item()? as f64)
    };

    let mut out = Vec::with_capacity(coords.len());
    for flat in coords {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + eps;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - eps;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        out.push(CoordCheck {
            param: p,
            index: i,
            analytic: analytic[p].data()[i] as f64,
            numeric: (plus - minus) / (2.0 * eps as f64),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn wrong_gradient_is_detected() {
        // x · detach(x): the tape sees slope x, the function has slope 2x
        let theta = Tensor::ones(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = grad_check(
            |g, v| {
                let detached = g.constant(v[0].to_tensor());
                let y = g.mul(&v[0], &detached)?;
                g.sum(&y)
            },
            &[theta],
            1e-4,
            10,
            &mut rng,
        )
        .unwrap();
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sampling_caps_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = [Tensor::ones(&[10]), Tensor::ones(&[3, 3])];
        let coords = grad_check_coords(
            |g, v| {
                let a = g.sum(&v[0])?;
                let b = g.sum(&v[1])?;
                g.add(&a, &b)
            },
            &params,
            1e-3,
            7,
            &mut rng,
        )
        .unwrap();
        assert_eq!(coords.len(), 7);
        assert!(coords
            .windows(2)
            .all(|w| (w[0].param, w[0].index) < (w[1].param, w[1].index)));
        assert!(coords.iter().all(|c| c.rel_err() < 1e-10));
    }
}
