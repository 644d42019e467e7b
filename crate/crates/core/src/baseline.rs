//! Distribution-matching losses on embeddings, used as comparison baselines
//! in place of the transport alignment term.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint_cost::BatchForward;
use crate::model::OutputGrads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    None,
    Coral,
    Mmd,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Coral => "coral",
            Baseline::Mmd => "mmd",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "coral" => Ok(Baseline::Coral),
            "mmd" => Ok(Baseline::Mmd),
            other => Err(Error::InvalidArgument(format!(
                "unknown baseline {other:?}"
            ))),
        }
    }
}

fn check(source: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if source.nrows() < 2 || target.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "baseline losses need at least 2 rows per batch".into(),
        ));
    }
    if source.ncols() != target.ncols() {
        return Err(Error::DimensionMismatch(
            "source and target embedding widths differ".into(),
        ));
    }
    Ok(())
}

fn centered_cov(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let xc = x - &mean.insert_axis(Axis(0));
    let cov = xc.t().dot(&xc) / (x.nrows() - 1) as f64;
    (xc, cov)
}

/// `‖cov(S) − cov(T)‖²_F / (4 d²)` and its gradients with respect to the rows.
pub fn coral_with_grad(
    source: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check(source, target)?;
    let d = source.ncols() as f64;
    let (sc, cs) = centered_cov(source);
    let (tc, ct) = centered_cov(target);
    let diff = &cs - &ct;
    let norm = 4.0 * d * d;
    let loss = diff.mapv(|v| v * v).sum() / norm;
    // d/dX of cov is 2/(n−1) Xc G for symmetric G; the mean term cancels.
    let g = &diff * (2.0 / norm);
    let gs = sc.dot(&g) * (2.0 / (source.nrows() - 1) as f64);
    let gt = tc.dot(&g) * (-2.0 / (target.nrows() - 1) as f64);
    Ok((loss, gs, gt))
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pooled pairwise squared distances; 1 when that is zero.
pub fn median_bandwidth(source: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let pooled =
        ndarray::concatenate(Axis(0), &[source.view(), target.view()]).expect("same width");
    let n = pooled.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.row(i), pooled.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased MMD² with kernel `exp(−‖x − y‖² / h)`, `h` the pooled median
/// squared distance (held fixed for the gradient). Equal-size batches use the
/// paired U-statistic, which drops the `i = j` cross pairs and is exactly zero
/// for identical batches.
pub fn mmd_with_grad(
    source: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check(source, target)?;
    mmd_with_bandwidth(source, target, median_bandwidth(source, target))
}

/// Unbiased MMD² and gradients for a given bandwidth `h`.
pub fn mmd_with_bandwidth(
    source: &Array2<f64>,
    target: &Array2<f64>,
    h: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check(source, target)?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let (n, m) = (source.nrows(), target.nrows());
    let mut gs = Array2::zeros(source.raw_dim());
    let mut gt = Array2::zeros(target.raw_dim());
    let mut loss = 0.0;

    // Within-set terms, weight w per ordered pair.
    let mut within = |x: &Array2<f64>, g: &mut Array2<f64>, w: f64| {
        for i in 0..x.nrows() {
            for j in 0..x.nrows() {
                if i == j {
                    continue;
                }
                let k = (-sq_dist(x.row(i), x.row(j)) / h).exp();
                loss += w * k;
                let coef = -2.0 * w * k / h;
                let delta: Array1<f64> = &x.row(i) - &x.row(j);
                g.row_mut(i).scaled_add(coef, &delta);
                g.row_mut(j).scaled_add(-coef, &delta);
            }
        }
    };
    within(source, &mut gs, 1.0 / (n * (n - 1)) as f64);
    within(target, &mut gt, 1.0 / (m * (m - 1)) as f64);

    let paired = n == m;
    let w = if paired {
        -2.0 / (n * (n - 1)) as f64
    } else {
        -2.0 / (n * m) as f64
    };
    for i in 0..n {
        for j in 0..m {
            if paired && i == j {
                continue;
            }
            let k = (-sq_dist(source.row(i), target.row(j)) / h).exp();
            loss += w * k;
            let coef = -2.0 * w * k / h;
            let delta: Array1<f64> = &source.row(i) - &target.row(j);
            gs.row_mut(i).scaled_add(coef, &delta);
            gt.row_mut(j).scaled_add(-coef, &delta);
        }
    }
    Ok((loss, gs, gt))
}

/// Baseline loss on the embeddings of two batches.
pub fn baseline_loss(kind: Baseline, source: &BatchForward, target: &BatchForward) -> Result<f64> {
    baseline_loss_with_grad(kind, source, target).map(|(l, _, _)| l)
}

/// Baseline loss with gradients routed to the embeddings.
pub fn baseline_loss_with_grad(
    kind: Baseline,
    source: &BatchForward,
    target: &BatchForward,
) -> Result<(f64, OutputGrads, OutputGrads)> {
    let (loss, gs, gt) = match kind {
        Baseline::None => return Err(Error::InvalidArgument("no baseline selected".into())),
        Baseline::Coral => coral_with_grad(&source.embeddings, &target.embeddings)?,
        Baseline::Mmd => mmd_with_grad(&source.embeddings, &target.embeddings)?,
    };
    let mut src = OutputGrads::zeros_for(source);
    let mut tgt = OutputGrads::zeros_for(target);
    src.embeddings = gs;
    tgt.embeddings = gt;
    Ok((loss, src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize, d: usize, shift: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0) + shift)
    }

    fn coral_loop(s: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let cov = |x: &Array2<f64>| {
            let (n, d) = x.dim();
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for a in 0..d {
                    mean[a] += x[[i, a]] / n as f64;
                }
            }
            let mut c = vec![vec![0.0; d]; d];
            for a in 0..d {
                for b in 0..d {
                    for i in 0..n {
                        c[a][b] += (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b]);
                    }
                    c[a][b] /= (n - 1) as f64;
                }
            }
            c
        };
        let (cs, ct) = (cov(s), cov(t));
        let d = s.ncols();
        let mut total = 0.0;
        for a in 0..d {
            for b in 0..d {
                total += (cs[a][b] - ct[a][b]).powi(2);
            }
        }
        total / (4.0 * (d * d) as f64)
    }

    #[test]
    fn identical_batches_give_zero() {
        let x = random(1, 10, 4, 0.0);
        assert_eq!(coral_with_grad(&x, &x).unwrap().0, 0.0);
        assert!(mmd_with_grad(&x, &x).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn coral_matches_loop() {
        for seed in 0..5 {
            let s = random(seed, 12, 5, 0.0);
            let t = random(seed + 100, 9, 5, 0.3) * 1.7;
            let (l, _, _) = coral_with_grad(&s, &t).unwrap();
            assert!((l - coral_loop(&s, &t)).abs() < 1e-14);
        }
    }

    #[test]
    fn mmd_separates_shifted_batches() {
        let s = random(2, 30, 3, 0.0);
        let near = random(3, 30, 3, 0.0);
        let far = random(4, 30, 3, 2.0);
        let near_l = mmd_with_grad(&s, &near).unwrap().0;
        let uneven = mmd_with_grad(&s, &random(7, 25, 3, 0.0)).unwrap().0;
        assert!(uneven > -0.05);
        let far_l = mmd_with_grad(&s, &far).unwrap().0;
        assert!(near_l > -0.05);
        assert!(far_l > near_l);
    }

    fn check_fd(
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>),
        s: &Array2<f64>,
        t: &Array2<f64>,
    ) {
        let (_, gs, gt) = f(s, t);
        let eps = 1e-5;
        for (which, g) in [(0, &gs), (1, &gt)] {
            for ((i, j), &an) in g.indexed_iter() {
                let eval = |delta: f64| {
                    let (mut s2, mut t2) = (s.clone(), t.clone());
                    if which == 0 {
                        s2[[i, j]] += delta;
                    } else {
                        t2[[i, j]] += delta;
                    }
                    f(&s2, &t2).0
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                assert!(
                    (fd - an).abs() <= 1e-8 + 1e-4 * an.abs(),
                    "({i},{j}) fd {fd} an {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = random(5, 6, 3, 0.0);
        let t = random(6, 7, 3, 0.4);
        check_fd(|a, b| coral_with_grad(a, b).unwrap(), &s, &t);
        let h = median_bandwidth(&s, &t);
        check_fd(|a, b| mmd_with_bandwidth(a, b, h).unwrap(), &s, &t);
        let t6 = random(8, 6, 3, 0.4);
        check_fd(|a, b| mmd_with_bandwidth(a, b, h).unwrap(), &s, &t6);
    }

    #[test]
    fn rejects_tiny_batches() {
        let x = random(1, 1, 3, 0.0);
        let y = random(2, 4, 3, 0.0);
        assert!(coral_with_grad(&x, &y).is_err());
        assert!(mmd_with_grad(&y, &x).is_err());
        assert!("wasserstein".parse::<Baseline>().is_err());
        assert_eq!("mmd".parse::<Baseline>().unwrap(), Baseline::Mmd);
    }
}
