//! Central finite-difference checks for anything built on [`Graph`].

use crate::graph::{Graph, Var};
use crate::optim::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that two tiny
/// gradients are not judged by their ratio.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Compares analytic parameter gradients of `loss` against fourth-order
/// central differences with step `h`. `loss` must be deterministic in the store
/// (fix any dropout seed inside it). At most `max_per_param` entries of
/// each parameter are probed, spread evenly. Stop-gradient and
/// straight-through sites keep their base-point values while probing.
pub fn check_params<F>(store: &mut ParamStore<f64>, h: f64, max_per_param: usize, loss: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let (analytic, frozen) = {
        let mut g = Graph::new(true, 0).recording();
        let l = loss(&mut g, store);
        (g.backward(l), g.take_frozen())
    };
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(true, 0).replaying(frozen.clone());
        let l = loss(&mut g, store);
        g.value(l).item()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = (n / max_per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(max_per_param) {
            let orig = store.value(id).data()[idx];
            let mut at = |delta: f64| {
                store.value_mut(id).data_mut()[idx] = orig + delta;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.param(id).map_or(0.0, |t| t.data()[idx]);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = idx;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap(), false);
        s
    }

    #[test]
    fn detach_is_held_fixed() {
        let mut s = store();
        let r = check_params(&mut s, 1e-6, 8, |g, st| {
            let x = g.param(st, st.id("x").unwrap());
            let d = g.detach(x);
            let p = g.mul(x, d);
            g.sum(p)
        });
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn straight_through_is_linearized() {
        let mut s = store();
        let r = check_params(&mut s, 1e-6, 8, |g, st| {
            let x = g.param(st, st.id("x").unwrap());
            let target = g.value(x).map(|v| v.round());
            let y = g.straight_through(x, target);
            let p = g.mul(y, y);
            g.sum(p)
        });
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn replay_is_exact_at_base_point() {
        let st = store();
        let f = |g: &mut Graph<f64>| {
            let x = g.param(&st, st.id("x").unwrap());
            let d = g.detach(x);
            let y = g.straight_through(x, Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap());
            let p = g.mul(y, d);
            g.sum(p)
        };
        let mut g = Graph::new(true, 0).recording();
        let l = f(&mut g);
        let base = g.value(l).item();
        let mut h = Graph::new(true, 0).replaying(g.take_frozen());
        let l = f(&mut h);
        assert_eq!(h.value(l).item(), base);
    }
}
