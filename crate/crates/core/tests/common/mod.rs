#![allow(dead_code)]

use pathkernel::{ModelSpec, NoiseStream, Schedule, TimeKind};

/// Deterministic source of coefficients for generated models.
pub struct Draws {
    stream: NoiseStream,
    buf: Vec<f64>,
    step: usize,
}

impl Draws {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: NoiseStream::new(seed, 1_000_003, 16),
            buf: Vec::new(),
            step: 0,
        }
    }

    pub fn normal(&mut self) -> f64 {
        if self.buf.is_empty() {
            let mut b = vec![0.0; 16];
            self.stream.fill(self.step, &mut b);
            self.step += 1;
            self.buf = b;
        }
        self.buf.pop().unwrap()
    }

    pub fn uniform(&mut self) -> f64 {
        // logistic approximation of the normal CDF; exact uniformity is not needed
        1.0 / (1.0 + (-1.702 * self.normal()).exp())
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }
}

/// A random smooth discrete map with two parameters:
///
/// * `f(x) = A x + 0.3 sin(C x) + g0 d0 * cos(x) + g1 e`
/// * `sigma(x) = s0 (1 + 0.5 sin^2(w . x) + g0 c0 cos(w . x)^2 / 4)`
/// * `Phi(x) = q . x + r |x|^2`
pub struct RandomModel {
    pub model: ModelSpec,
    pub schedule: Schedule,
    pub n_steps: usize,
}

pub fn random_model(seed: u64) -> RandomModel {
    let mut d = Draws::new(seed);
    let m = 1 + d.index(5);
    let n_steps = 1 + d.index(50);
    // Frobenius norm 0.9 keeps the linear part contracting
    let mut a = d.vec(m * m, 1.0);
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter_mut().for_each(|v| *v *= 0.9 / fro);
    let c = d.vec(m * m, 1.0 / (m as f64).sqrt());
    let d0 = d.vec(m, 1.0);
    let e = d.vec(m, 1.0);
    let w = d.vec(m, 0.7);
    let s0 = 0.2 + d.uniform();
    let c0 = d.uniform();
    let q = d.vec(m, 1.0);
    let r = d.normal();
    let x0 = d.vec(m, 1.0);
    let v0 = vec![d.vec(m, 1.0), d.vec(m, 1.0)];
    let alpha0 = 0.6 * d.uniform();
    let alpha1 = 0.4 * d.uniform();

    let cx = move |c: &[f64], x: &[f64], i: usize| -> f64 {
        (0..x.len()).map(|j| c[i * x.len() + j] * x[j]).sum()
    };
    let wx = move |w: &[f64], x: &[f64]| -> f64 { w.iter().zip(x).map(|(a, b)| a * b).sum() };

    let (a1, c1, d01) = (a.clone(), c.clone(), d0.clone());
    let drift = move |x: &[f64], o: &mut [f64]| {
        for i in 0..x.len() {
            o[i] = cx(&a1, x, i) + 0.3 * cx(&c1, x, i).sin() + d01[i] * x[i].cos();
        }
    };
    let (a2, c2, d02) = (a.clone(), c.clone(), d0.clone());
    let jac = move |x: &[f64], j: &mut [f64]| {
        let m = x.len();
        for i in 0..m {
            let ci = 0.3 * cx(&c2, x, i).cos();
            for k in 0..m {
                j[i * m + k] = a2[i * m + k] + ci * c2[i * m + k];
            }
            j[i * m + i] -= d02[i] * x[i].sin();
        }
    };
    let w1 = w.clone();
    let sigma = move |x: &[f64]| {
        let u = wx(&w1, x);
        s0 * (1.0 + 0.5 * u.sin().powi(2) + 0.25 * c0 * u.cos().powi(2))
    };
    let w2 = w.clone();
    let grad_sigma = move |x: &[f64], g: &mut [f64]| {
        let u = wx(&w2, x);
        let du = s0 * (0.5 - 0.25 * c0) * (2.0 * u).sin();
        for (gi, wi) in g.iter_mut().zip(&w2) {
            *gi = du * wi;
        }
    };
    let d03 = d0.clone();
    let w3 = w.clone();
    let e1 = e.clone();
    let q1 = q.clone();
    let q2 = q.clone();
    let model = ModelSpec::builder(m, TimeKind::DiscreteMap)
        .drift(drift, jac)
        .diffusion(sigma, grad_sigma)
        .param(
            move |x, o| {
                for i in 0..x.len() {
                    o[i] = d03[i] * x[i].cos();
                }
            },
            move |x| s0 * 0.25 * wx(&w3, x).cos().powi(2),
        )
        .param(move |_, o| o.copy_from_slice(&e1), |_| 0.0)
        .observable(
            move |x| wx(&q1, x) + r * x.iter().map(|v| v * v).sum::<f64>(),
            move |x, g| {
                for i in 0..x.len() {
                    g[i] = q2[i] + 2.0 * r * x[i];
                }
            },
        )
        .x0(x0)
        .v0(v0)
        .build()
        .expect("generated model is valid");
    let schedule = Schedule::adapted(move |n, x| alpha0 + alpha1 * (n as f64 + x[0]).sin().abs());
    RandomModel {
        model,
        schedule,
        n_steps,
    }
}

pub fn max_abs_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}
