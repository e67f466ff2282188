use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that exactly-zero gradients compare in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every scalar of every parameter in `store`.
///
/// `f` must build a scalar loss on the supplied evaluation-mode graph and be
/// deterministic; it is called once for the reverse pass and twice per
/// scalar for the central differences with step `h`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        g.into_param_grads()
    };
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, t) in grads {
        analytic[id.index()] = t.into_data();
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[id.index()][k], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
