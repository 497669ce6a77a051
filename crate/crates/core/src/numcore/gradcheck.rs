//! Central finite-difference verification of analytic gradients.
//!
//! The loss builder is evaluated on a double-precision graph so that
//! rounding noise stays far below the tolerance; parameters keep their `f32`
//! storage and the realized perturbation width is measured after rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumError, ParamSet, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub n_probes: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Added to every analytic gradient; non-zero only for fault injection.
    pub fault: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_probes: 64,
            eps: 1e-3,
            tol: 1e-3,
            seed: 0,
            fault: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error seen for each probed parameter, in set order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub probes: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn eval<F>(params: &ParamSet, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::<f64>::inference();
    let loss = build(&mut g, params)?;
    let v = g.value(loss).item().ok_or_else(|| NumError::NotScalar(g.value(loss).shape().to_vec()))?;
    if !v.is_finite() {
        return Err(NumError::NonFinite(v));
    }
    Ok(v)
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences at `cfg.n_probes` parameter coordinates, spread round-robin
/// over the parameters of `params`.
pub fn grad_check<F>(params: &ParamSet, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let loss = build(&mut g, params)?;
    let lv = g.value(loss).item().ok_or_else(|| NumError::NotScalar(g.value(loss).shape().to_vec()))?;
    if !lv.is_finite() {
        return Err(NumError::NonFinite(lv));
    }
    let grads = g.backward(loss)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|p| p.name().to_string()).collect();
    let mut worst = vec![None::<f64>; names.len()];
    let total: usize = params.num_elements();
    let probes = cfg.n_probes.min(total);

    for k in 0..probes {
        let pi = k % names.len();
        let len = params.get(&names[pi])?.value.len();
        let ei = rng.random_range(0..len);
        let orig = params.get(&names[pi])?.value[ei];

        let plus = (orig as f64 + cfg.eps) as f32;
        let minus = (orig as f64 - cfg.eps) as f32;
        work.get_mut(&names[pi])?.value.data_mut()[ei] = plus;
        let lp = eval(&work, &build)?;
        work.get_mut(&names[pi])?.value.data_mut()[ei] = minus;
        let lm = eval(&work, &build)?;
        work.get_mut(&names[pi])?.value.data_mut()[ei] = orig;

        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let analytic = grads.param(&names[pi]).map_or(0.0, |t| t[ei]) + cfg.fault;
        let err = relative_error(analytic, numeric);
        let w = worst[pi].get_or_insert(0.0);
        *w = w.max(err);
    }

    let per_param: Vec<(String, f64)> = names
        .into_iter()
        .zip(worst)
        .filter_map(|(n, w)| w.map(|w| (n, w)))
        .collect();
    let max_rel_err = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: max_rel_err < cfg.tol,
        per_param,
        max_rel_err,
        probes,
    })
}
