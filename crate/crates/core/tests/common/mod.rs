//! Independent reference computations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use multitopic::corpus::{Corpus, Document, Vocabulary};
use multitopic::inference::{Encoder, TrainedModel};
use multitopic::model::{EnvDeviations, GlobalTopics, ModelConfig};
use multitopic::numerics::{Matrix, RngStream};

/// Composite Simpson on `[lo, hi]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// `∫₀^∞ g(τ) dτ` for a positive integrand given in log form, through
/// `τ = eᵘ`. The integrand is rescaled by its grid maximum before
/// exponentiating and the log of the integral is returned.
pub fn log_integral_positive(log_g: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi, n) = (-60.0, 60.0, 240_000);
    let log_h = |u: f64| log_g(u.exp()) + u;
    let step = (hi - lo) / n as f64;
    let peak = (0..=n).map(|i| log_h(lo + i as f64 * step)).fold(f64::NEG_INFINITY, f64::max);
    peak + simpson(|u| (log_h(u) - peak).exp(), lo, hi, n).ln()
}

/// Log density of `γ | τ ~ N(0, 1/τ)`, `τ ~ Gamma(shape a, rate b)`,
/// integrated over `τ`. Both the mixture and the Gamma normalizer are
/// computed by quadrature, so no special function is involved.
pub fn ard_marginal_quadrature(gamma: f64, a: f64, b: f64) -> f64 {
    let log_unnorm_gamma = |t: f64| (a - 1.0) * t.ln() - b * t;
    let log_z = log_integral_positive(log_unnorm_gamma);
    let log_joint = |t: f64| {
        0.5 * (t / (2.0 * std::f64::consts::PI)).ln() - 0.5 * t * gamma * gamma + log_unnorm_gamma(t)
    };
    log_integral_positive(log_joint) - log_z
}

// Double-double arithmetic: a value is hi + lo with |lo| ≤ ulp(hi)/2.

#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Dd {
        let (s, e) = two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        Dd::norm(s, e + self.lo + o.lo)
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::norm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            self.neg()
        } else {
            self
        }
    }
}

/// Solve the normal equations `XᵀX β = Xᵀy` in double-double precision
/// with partially pivoted Gaussian elimination.
pub fn normal_equations_dd(x: &Matrix, y: &[f64]) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut a = vec![vec![Dd::ZERO; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).fold(Dd::ZERO, |s, r| s.add(Dd::from(x.get(r, i)).mul(Dd::from(x.get(r, j)))));
        }
        a[i][p] = (0..n).fold(Dd::ZERO, |s, r| s.add(Dd::from(x.get(r, i)).mul(Dd::from(y[r]))));
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&r, &s| a[r][col].abs().hi.total_cmp(&a[s][col].abs().hi))
            .unwrap();
        a.swap(col, piv);
        for r in col + 1..p {
            let f = a[r][col].div(a[col][col]);
            for c in col..=p {
                a[r][c] = a[r][c].sub(f.mul(a[col][c]));
            }
        }
    }
    let mut beta = vec![Dd::ZERO; p];
    for r in (0..p).rev() {
        let mut s = a[r][p];
        for c in r + 1..p {
            s = s.sub(a[r][c].mul(beta[c]));
        }
        beta[r] = s.div(a[r][r]);
    }
    beta.into_iter().map(|b| b.hi + b.lo).collect()
}

/// A trained-model shell with the given topic weights and an untrained
/// encoder; enough for the metrics that read only `β̂`/`γ̂`.
pub fn model_with(beta: Matrix, gamma: Option<EnvDeviations>, envs: usize) -> TrainedModel {
    let (k, v) = beta.shape();
    let config = ModelConfig {
        num_topics: k,
        ..ModelConfig::default()
    };
    TrainedModel {
        prior: config.prior.to_spec(envs, k),
        config,
        vocab: Vocabulary::from_terms((0..v).map(|i| format!("t{i:03}")).collect()).unwrap(),
        env_names: (0..envs).map(|e| format!("env{e}")).collect(),
        beta_hat: GlobalTopics { beta },
        gamma_hat: gamma,
        encoder: Encoder::new(v, k, 4, 1, &mut RngStream::new(0, 0)),
        training_log: Vec::new(),
    }
}

pub fn doc(counts: Vec<(usize, u32)>, env: usize) -> Document {
    Document {
        counts,
        env,
        raw_id: String::new(),
    }
}

pub fn corpus_of(model: &TrainedModel, docs: Vec<Document>) -> Corpus {
    Corpus {
        docs,
        vocab: model.vocab.clone(),
        env_names: model.env_names.clone(),
    }
}

/// Test split of a generated corpus: documents from `n_train` on.
pub fn split_off(corpus: &Corpus, n_train: usize) -> (Corpus, Corpus) {
    let mut train = corpus.clone();
    let mut test = corpus.clone();
    test.docs = train.docs.split_off(n_train);
    (train, test)
}
