#![allow(dead_code)]

use aalen_cure::model::{CovariatePair, Partition, StepCoefficients, SubjectRecord, Theta};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HORIZON: f64 = 2.0;

pub fn record(t: f64, event: bool, x: &[f64], z: &[f64]) -> SubjectRecord {
    SubjectRecord::new(t, event, CovariatePair::from_columns(x, z).unwrap()).unwrap()
}

/// Random data and parameter with `n ~ 5..60`, `p, q ~ 1..3`, `K ~ 1..5`;
/// some observed times sit exactly on window cuts and every hazard is nonnegative.
pub fn random_instance(seed: u64) -> (Vec<SubjectRecord>, Theta) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..60);
    let p = rng.random_range(1..=3);
    let q = rng.random_range(1..=3);
    let k = rng.random_range(1..=5);
    let part = Partition::new(HORIZON, k).unwrap();
    let data = (0..n)
        .map(|_| {
            let t = if rng.random::<f64>() < 0.15 {
                part.cut(rng.random_range(1..=k))
            } else {
                0.01 + (HORIZON - 0.01) * rng.random::<f64>()
            };
            let x: Vec<f64> = (1..p).map(|_| rng.random_range(-1.5..1.5)).collect();
            let z: Vec<f64> = (1..q).map(|_| rng.random_range(-1.0..1.0)).collect();
            record(t, rng.random::<f64>() < 0.6, &x, &z)
        })
        .collect();
    // intercept large enough that z'beta_j >= 0 for |z_l| <= 1
    let beta = (0..k)
        .map(|_| {
            DVector::from_iterator(
                q,
                (0..q).map(|l| {
                    if l == 0 {
                        rng.random_range(0.2..1.0)
                    } else {
                        rng.random_range(-0.1..0.1)
                    }
                }),
            )
        })
        .collect();
    let theta = Theta {
        beta: StepCoefficients::new(part, beta).unwrap(),
        gamma: DVector::from_iterator(p, (0..p).map(|_| rng.random_range(-1.0..1.0))),
    };
    (data, theta)
}

/// Central differences of `f` at `theta` with step `h`.
pub fn central_differences<F: Fn(&Theta) -> DVector<f64>>(f: F, theta: &Theta, h: f64) -> DMatrix<f64> {
    let v = theta.to_vector();
    let part = *theta.partition();
    let dim = v.len();
    let mut jac = DMatrix::zeros(dim, dim);
    for c in 0..dim {
        let mut up = v.clone();
        let mut down = v.clone();
        up[c] += h;
        down[c] -= h;
        let fu = f(&Theta::from_vector(part, theta.q(), theta.p(), &up).unwrap());
        let fd = f(&Theta::from_vector(part, theta.q(), theta.p(), &down).unwrap());
        jac.set_column(c, &((fu - fd) / (2.0 * h)));
    }
    jac
}

/// Occurrence/exposure Nelson-Aalen estimate `sum_{s <= t} dN(s) / Y(s)` at each distinct event time.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Vec<(f64, f64)> {
    let mut event_times: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut total = 0.0;
    event_times
        .into_iter()
        .map(|s| {
            let d = times.iter().zip(events).filter(|(&t, &e)| e && t == s).count();
            let y = times.iter().filter(|&&t| t >= s).count();
            total += d as f64 / y as f64;
            (s, total)
        })
        .collect()
}

/// Richardson extrapolation `(4 D(h/2) - D(h)) / 3` of central differences, error `O(h^4)`.
pub fn richardson_differences<F: Fn(&Theta) -> DVector<f64>>(f: F, theta: &Theta, h: f64) -> DMatrix<f64> {
    let coarse = central_differences(&f, theta, h);
    let fine = central_differences(&f, theta, h / 2.0);
    (fine * 4.0 - coarse) / 3.0
}
