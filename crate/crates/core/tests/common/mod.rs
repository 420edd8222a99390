#![allow(dead_code)]

//! Oracles shared by the integration suites. Nothing here calls into the
//! code paths under test except to evaluate forward values.

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Step for the fourth-order stencil; its truncation error is O(h⁴).
pub const FD4_STEP: f64 = 1e-3;

/// Fourth-order central differences. The larger admissible step keeps
/// roundoff well below the smallest gradients of interest.
pub fn central_diff4(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            probe[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

/// Central differences that notice when a probe straddles a ReLU kink.
/// On a smooth neighbourhood the estimates at `h` and `h/10` agree to
/// O(h²); when they disagree by more than the gradient tolerance the
/// coordinate is assumed to straddle a kink and the `h/10` estimate, whose
/// interval is ten times less likely to contain one, is used. Returns the
/// estimates and how many coordinates fell back.
pub fn central_diff_kink_aware(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> (Vec<f64>, usize) {
    let mut probe = x.to_vec();
    let mut restepped = 0;
    let grads = (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut central = |step: f64| {
                probe[i] = orig + step;
                let up = f(&probe);
                probe[i] = orig - step;
                let down = f(&probe);
                (up - down) / (2.0 * step)
            };
            let coarse = central(h);
            let fine = central(h / 10.0);
            probe[i] = orig;
            if rel_err(coarse, fine) > GRAD_REL_TOL {
                restepped += 1;
                fine
            } else {
                coarse
            }
        })
        .collect();
    (grads, restepped)
}

/// Relative error with a tiny absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over a whole tensor.
pub fn norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-300)
}

pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], what: &str) {
    let err = max_rel_err(analytic, numeric);
    if err > GRAD_REL_TOL {
        let worst = (0..analytic.len())
            .max_by(|&i, &j| rel_err(analytic[i], numeric[i]).total_cmp(&rel_err(analytic[j], numeric[j])))
            .unwrap();
        panic!(
            "{what}: max relative gradient error {err:e} > {GRAD_REL_TOL:e} at [{worst}]: analytic {:e}, numeric {:e}",
            analytic[worst], numeric[worst]
        );
    }
}

/// Small deterministic generator for test data (xorshift64*).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Random per-frame log-probabilities, `classes` rows by `frames` columns.
    pub fn log_probs(&mut self, classes: usize, frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; classes * frames];
        for t in 0..frames {
            let logits: Vec<f64> = (0..classes).map(|_| self.uniform(-3.0, 3.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            for k in 0..classes {
                out[k * frames + t] = logits[k] - lse;
            }
        }
        out
    }
}

/// Every sequence over `0..base` of length `len`, in counting order.
pub fn sequences(base: usize, len: usize) -> Vec<Vec<usize>> {
    let total = base.pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = code % base;
                    code /= base;
                    d
                })
                .collect()
        })
        .collect()
}

/// CTC collapse: merge repeats, drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<u32> {
    let mut out = vec![];
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p as u32);
        }
        prev = Some(p);
    }
    out
}

/// Probability mass of every collapsed sequence, by enumerating all
/// `classes^frames` paths. `logp` is frame-major; blank is the last class.
pub fn collapsed_posteriors(logp: &[f64], frames: usize, classes: usize) -> std::collections::BTreeMap<Vec<u32>, f64> {
    let mut mass = std::collections::BTreeMap::new();
    for path in sequences(classes, frames) {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp[t * classes + k]).sum();
        *mass.entry(collapse_path(&path, classes - 1)).or_insert(0.0) += lp.exp();
    }
    mass
}

/// Brute-force CTC negative log-likelihood of `target`.
pub fn brute_force_ctc(logp: &[f64], frames: usize, classes: usize, target: &[u32]) -> f64 {
    let total: f64 = sequences(classes, frames)
        .into_iter()
        .filter(|path| collapse_path(path, classes - 1) == target)
        .map(|path| path.iter().enumerate().map(|(t, &k)| logp[t * classes + k]).sum::<f64>().exp())
        .sum();
    -total.ln()
}
