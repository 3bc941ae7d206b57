//! Central finite-difference checks for tape gradients.

use super::params::{Gradients, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries whose one-sided differences disagree by more than this
    /// relative amount straddle a kink and are skipped.
    pub kink: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub failed: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0 && self.checked > 0 && self.skipped * 20 <= self.checked + self.skipped
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failed += other.failed;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }

    fn record(&mut self, cfg: &CheckConfig, label: impl FnOnce() -> String, analytic: f64, f: [f64; 3]) {
        let [fm, f0, fp] = f;
        let h = cfg.step;
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > cfg.kink * fwd.abs().max(bwd.abs()).max(cfg.floor * 1e3) {
            if std::env::var("GRADCHECK_DEBUG").is_ok() {
                eprintln!("skip {}: fwd {fwd:e} bwd {bwd:e} analytic {analytic:e}", label());
            }
            self.skipped += 1;
            return;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        self.checked += 1;
        if rel > cfg.tolerance {
            self.failed += 1;
        }
        if rel > self.max_rel || self.worst.is_empty() {
            self.max_rel = rel;
            self.worst = format!("{}: analytic {analytic:.6e}, numeric {numeric:.6e}", label());
        }
    }
}

/// Checks gradients with respect to leaf tensors. `build` must create the
/// leaves in order via `tape.leaf` from the given values and return a scalar.
pub fn check_leaves<F>(store: &ParamStore, leaves: &[Tensor], cfg: &CheckConfig, build: F) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::frozen(store);
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut tape = Tape::frozen(store);
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let l = build(&mut tape, &vars);
    let mut pg = Gradients::new();
    let lg = tape.backward(l, &mut pg).expect("scalar loss");
    let f0 = tape.value(l).item();
    let mut report = CheckReport::default();
    let mut vals = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        for k in 0..leaves[li].len() {
            let analytic = lg.get(*var).map_or(0.0, |g| g.data()[k]);
            let orig = vals[li].data()[k];
            vals[li].data_mut()[k] = orig + cfg.step;
            let fp = eval(&vals);
            vals[li].data_mut()[k] = orig - cfg.step;
            let fm = eval(&vals);
            vals[li].data_mut()[k] = orig;
            report.record(cfg, || format!("leaf {li}[{k}]"), analytic, [fm, f0, fp]);
        }
    }
    report
}

/// Checks gradients with respect to store parameters. At most `per_param`
/// entries of each parameter are probed, chosen by `pick` from the entries
/// with the largest analytic gradient magnitude plus a stride over the rest.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], per_param: usize, cfg: &CheckConfig, build: F) -> CheckReport
where
    F: Fn(&mut Tape) -> Var,
{
    let mut grads = Gradients::new();
    let f0 = {
        let mut tape = Tape::new(store);
        let l = build(&mut tape);
        tape.backward(l, &mut grads).expect("scalar loss");
        tape.value(l).item()
    };
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::frozen(s);
        let l = build(&mut tape);
        tape.value(l).item()
    };
    let mut report = CheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let g = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(1, n));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
        let mut picks: Vec<usize> = order.iter().take(per_param / 2).copied().collect();
        let stride = (n / (per_param - picks.len()).max(1)).max(1);
        picks.extend((0..n).step_by(stride).take(per_param - picks.len()));
        picks.sort_unstable();
        picks.dedup();
        for k in picks {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + cfg.step;
            let fp = eval(store);
            store.get_mut(id).data_mut()[k] = orig - cfg.step;
            let fm = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let name = store.name(id).to_string();
            report.record(cfg, || format!("{name}[{k}]"), g.data()[k], [fm, f0, fp]);
        }
    }
    report
}
