use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Settings for a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Entries with `max(|analytic|, |numeric|)` below this are compared on an
    /// absolute scale of `floor`.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar `f` with central differences,
/// for a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), opts)
}

/// Multi-input variant: `f` receives one leaf per entry of `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(n) if n < x.numel() => sample(&mut rng, x.numel(), n).into_vec(),
            _ => (0..x.numel()).collect(),
        };
        for c in coords {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + opts.h;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.h;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (i, c);
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}
