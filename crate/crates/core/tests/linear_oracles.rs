//! Linear-Gaussian chains: MAP inference against an RTS smoother and the EKF
//! against a dense Kalman filter, both written here with nalgebra.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothlearn::factors::FactorKind;
use smoothlearn::filter::{ekf_run, Belief};
use smoothlearn::graph::{Factor, FactorGraph, Measurement, NoiseModel, ParameterStore};
use smoothlearn::lie::ManifoldKind;
use smoothlearn::solve::{gn_step, LinearBackend};

const T: usize = 20;
const N: usize = 4;
const M: usize = 2;

struct Chain {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DVector<f64>,
    r: DVector<f64>,
    m0: DVector<f64>,
    p0: DVector<f64>,
    z: Vec<DVector<f64>>,
}

fn random_chain(rng: &mut ChaCha8Rng) -> Chain {
    let a =
        DMatrix::identity(N, N) + DMatrix::from_fn(N, N, |_, _| 0.1 * rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(M, N, |_, _| rng.random_range(-1.0..1.0));
    let q = DVector::from_fn(N, |_, _| rng.random_range(0.05..0.5));
    let r = DVector::from_fn(M, |_, _| rng.random_range(0.1..1.0));
    let m0 = DVector::from_fn(N, |_, _| rng.random_range(-1.0..1.0));
    let p0 = DVector::from_fn(N, |_, _| rng.random_range(0.5..2.0));
    let z = (0..T)
        .map(|_| DVector::from_fn(M, |_, _| rng.random_range(-3.0..3.0)))
        .collect();
    Chain {
        a,
        c,
        q,
        r,
        m0,
        p0,
        z,
    }
}

fn row_major(m: &DMatrix<f64>) -> Arc<[f64]> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    Arc::from(v)
}

fn inv_sqrt(v: &DVector<f64>) -> Vec<f64> {
    v.iter().map(|x| 1.0 / x.sqrt()).collect()
}

fn build(ch: &Chain) -> FactorGraph {
    let mut factors = vec![Factor {
        kind: FactorKind::LinearPrior { dim: N },
        vars: vec![0],
        measurement: Measurement::Fixed(ch.m0.iter().copied().collect()),
        noise: NoiseModel::Fixed(inv_sqrt(&ch.p0)),
    }];
    let a = row_major(&ch.a);
    let c = row_major(&ch.c);
    for t in 0..T {
        if t > 0 {
            factors.push(Factor {
                kind: FactorKind::LinearTransition {
                    dim: N,
                    a: a.clone(),
                },
                vars: vec![t - 1, t],
                measurement: Measurement::None,
                noise: NoiseModel::Fixed(inv_sqrt(&ch.q)),
            });
        }
        factors.push(Factor {
            kind: FactorKind::LinearObservation {
                state_dim: N,
                meas_dim: M,
                c: c.clone(),
            },
            vars: vec![t],
            measurement: Measurement::Fixed(ch.z[t].iter().copied().collect()),
            noise: NoiseModel::Fixed(inv_sqrt(&ch.r)),
        });
    }
    FactorGraph::new(vec![ManifoldKind::Euclidean(N); T], factors).unwrap()
}

/// Filtered means and covariances of the textbook Kalman filter.
fn kalman(ch: &Chain) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let q = DMatrix::from_diagonal(&ch.q);
    let r = DMatrix::from_diagonal(&ch.r);
    let mut m = ch.m0.clone();
    let mut p = DMatrix::from_diagonal(&ch.p0);
    let mut out = Vec::with_capacity(T);
    for t in 0..T {
        if t > 0 {
            m = &ch.a * &m;
            p = &ch.a * &p * ch.a.transpose() + &q;
        }
        let s = &ch.c * &p * ch.c.transpose() + &r;
        let k = &p * ch.c.transpose() * s.try_inverse().unwrap();
        m = &m + &k * (&ch.z[t] - &ch.c * &m);
        p = (DMatrix::identity(N, N) - &k * &ch.c) * &p;
        out.push((m.clone(), p.clone()));
    }
    out
}

/// Rauch-Tung-Striebel backward pass over the Kalman output.
fn rts(ch: &Chain) -> Vec<DVector<f64>> {
    let q = DMatrix::from_diagonal(&ch.q);
    let filtered = kalman(ch);
    let mut smoothed = vec![filtered[T - 1].0.clone(); T];
    for t in (0..T - 1).rev() {
        let (mf, pf) = &filtered[t];
        let pp = &ch.a * pf * ch.a.transpose() + &q;
        let g = pf * ch.a.transpose() * pp.try_inverse().unwrap();
        smoothed[t] = mf + &g * (&smoothed[t + 1] - &ch.a * mf);
    }
    smoothed
}

fn chains() -> Vec<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..50).map(|_| random_chain(&mut rng)).collect()
}

#[test]
fn one_gauss_newton_step_matches_rts() {
    let start = Instant::now();
    for ch in chains() {
        let g = build(&ch);
        let inst = g.instantiate::<f64>(&ParameterStore::new(), &[]).unwrap();
        let x0 = vec![vec![0.0; N]; T];
        let step = gn_step(&g, &x0, &inst, &LinearBackend::Cholesky).unwrap();
        let oracle = rts(&ch);
        let err = step
            .next
            .iter()
            .zip(&oracle)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "MAP vs RTS max error {err}");
        let second = gn_step(&g, &step.next, &inst, &LinearBackend::Cholesky).unwrap();
        let norm = second.delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(norm < 1e-10, "second step norm {norm}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn conjugate_gradient_step_agrees() {
    for ch in chains().into_iter().take(10) {
        let g = build(&ch);
        let inst = g.instantiate::<f64>(&ParameterStore::new(), &[]).unwrap();
        let x0 = vec![vec![0.0; N]; T];
        let step = gn_step(&g, &x0, &inst, &LinearBackend::cg_default()).unwrap();
        for (a, b) in step.next.iter().zip(&rts(&ch)) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn ekf_matches_kalman_filter() {
    for ch in chains() {
        let g = build(&ch);
        let inst = g.instantiate::<f64>(&ParameterStore::new(), &[]).unwrap();
        let mut cov = vec![0.0; N * N];
        for i in 0..N {
            cov[i * N + i] = ch.p0[i];
        }
        let initial = Belief {
            mean: ch.m0.iter().copied().collect(),
            cov,
        };
        let beliefs = ekf_run(&g, &inst, initial).unwrap();
        for (b, (m, p)) in beliefs.iter().zip(kalman(&ch)) {
            for i in 0..N {
                assert!((b.mean[i] - m[i]).abs() < 1e-10);
                for j in 0..N {
                    assert!((b.cov[i * N + j] - p[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }
}
