use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Coordinates whose relative error exceeds this are re-estimated with a
    /// ten times smaller step and keep the better estimate; a step that
    /// straddles an activation kink is not a gradient error.
    pub refine_above: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords_per_tensor: None,
            floor: 1e-6,
            refine_above: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    /// Coordinates that needed the smaller step.
    pub refined: usize,
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::ShapeMismatch("grad_check needs a scalar root".into()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of every parameter with central differences
/// `(f(θ+h) − f(θ−h)) / 2h`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    g.backward(root)?;
    let analytic = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (name, t) in store.iter() {
        let n = t.len();
        let mut coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        let grad = analytic.get(name);
        for i in coords {
            let a = grad.map_or(0.0, |g| g[i]);
            let orig = t.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let fp = eval(&f, &work)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let fm = eval(&f, &work)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            let rel_of = |num: f64| (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            let mut num = central(opts.step)?;
            let mut rel = rel_of(num);
            if opts.refine_above.is_some_and(|t| rel > t) {
                let fine = central(opts.step / 10.0)?;
                if rel_of(fine) < rel {
                    num = fine;
                    rel = rel_of(fine);
                }
                report.refined += 1;
            }
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some(CoordCheck {
                        param: name.clone(),
                        index: i,
                        analytic: a,
                        numeric: num,
                        rel_err: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}
