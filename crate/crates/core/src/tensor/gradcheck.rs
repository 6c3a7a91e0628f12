//! Central finite-difference gradient checking, run at f64.
//!
//! The harness rebuilds the computation from scratch for every probe, so the
//! function under test is an ordinary closure from leaf tensors to a scalar
//! loss. Relative error uses a small absolute floor so coordinates whose
//! true gradient sits at the finite-difference noise floor do not register
//! as spurious failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

/// Default probe step for f64 central differences.
pub const DEFAULT_H: f64 = 1e-4;

/// One checked coordinate: analytic vs numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct CoordCheck {
    pub leaf: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check over one function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    pub failures_at: Vec<(f64, usize)>,
}

impl GradCheckReport {
    /// Fraction of checked coordinates within `tol` relative error.
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        if self.coords_checked == 0 {
            return 1.0;
        }
        let failing = self
            .failures_at
            .iter()
            .find(|(t, _)| *t == tol)
            .map(|(_, n)| *n)
            .unwrap_or(0);
        1.0 - failing as f64 / self.coords_checked as f64
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn forward_value<F>(leaves: &[(Vec<usize>, Vec<f64>)], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::<f64>::new();
    let mut ts = Vec::with_capacity(leaves.len());
    for (shape, data) in leaves {
        ts.push(tape.var(shape, data.clone())?);
    }
    let loss = build(&mut tape, &ts)?;
    tape.scalar_value(loss)
}

fn analytic_grads<F>(leaves: &[(Vec<usize>, Vec<f64>)], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::<f64>::new();
    let mut ts = Vec::with_capacity(leaves.len());
    for (shape, data) in leaves {
        ts.push(tape.var(shape, data.clone())?);
    }
    let loss = build(&mut tape, &ts)?;
    tape.backward(loss)?;
    Ok(ts
        .iter()
        .zip(leaves)
        .map(|(&t, (_, data))| {
            tape.grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; data.len()])
        })
        .collect())
}

/// Check every coordinate of every leaf.
pub fn check_all<F>(
    leaves: &[(Vec<usize>, Vec<f64>)],
    build: F,
    h: f64,
    tols: &[f64],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, (_, data))| (0..data.len()).map(move |ci| (li, ci)))
        .collect();
    check_coords(leaves, build, h, tols, &coords)
}

/// Check a deterministic random sample of coordinates.
pub fn check_sampled<F>(
    leaves: &[(Vec<usize>, Vec<f64>)],
    build: F,
    h: f64,
    tols: &[f64],
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let total: usize = leaves.iter().map(|(_, d)| d.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(samples.min(total));
    if samples >= total {
        for (li, (_, data)) in leaves.iter().enumerate() {
            for ci in 0..data.len() {
                coords.push((li, ci));
            }
        }
    } else {
        for _ in 0..samples {
            let mut flat = rng.gen_range(0..total);
            for (li, (_, data)) in leaves.iter().enumerate() {
                if flat < data.len() {
                    coords.push((li, flat));
                    break;
                }
                flat -= data.len();
            }
        }
    }
    check_coords(leaves, build, h, tols, &coords)
}

fn check_coords<F>(
    leaves: &[(Vec<usize>, Vec<f64>)],
    build: F,
    h: f64,
    tols: &[f64],
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_grads(leaves, &build)?;
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures_at: tols.iter().map(|&t| (t, 0)).collect(),
    };
    let mut probe = leaves.to_vec();
    for &(li, ci) in coords {
        let orig = probe[li].1[ci];
        probe[li].1[ci] = orig + h;
        let plus = forward_value(&probe, &build)?;
        probe[li].1[ci] = orig - h;
        let minus = forward_value(&probe, &build)?;
        probe[li].1[ci] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[li][ci];
        let err = rel_err(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(CoordCheck {
                leaf: li,
                coord: ci,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
        for (tol, count) in report.failures_at.iter_mut() {
            if err > *tol {
                *count += 1;
            }
        }
    }
    Ok(report)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Per-operation gradient checks over small randomized shapes. Each entry
/// composes the op with a fixed random weighting so the output gradient is
/// not a trivial all-ones vector. Shared by unit tests and the acceptance
/// suite.
pub fn check_standard_ops() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();

    // Weighted reduction helper applied to each op's output.
    fn reduce(tape: &mut Tape<f64>, t: Tensor, seed: u64) -> Result<Tensor> {
        let shape = tape.shape(t).to_vec();
        let n: usize = shape.iter().product();
        let mut wrng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(&shape, rand_vec(&mut wrng, n))?;
        let p = tape.mul(t, w)?;
        tape.sum(p)
    }

    macro_rules! case {
        ($name:literal, $leaves:expr, $build:expr) => {
            out.push(($name, check_all(&$leaves, $build, DEFAULT_H, &[1e-3])?));
        };
    }

    let l2 = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        (shape.to_vec(), rand_vec(rng, n))
    };

    case!(
        "add",
        [l2(&mut rng, &[3, 4]), l2(&mut rng, &[3, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.add(ts[0], ts[1])?;
            reduce(t, c, 11)
        }
    );
    case!(
        "mul",
        [l2(&mut rng, &[3, 4]), l2(&mut rng, &[3, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.mul(ts[0], ts[1])?;
            reduce(t, c, 12)
        }
    );
    case!(
        "scale",
        [l2(&mut rng, &[5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.scale(ts[0], -1.7)?;
            reduce(t, c, 13)
        }
    );
    case!(
        "tanh",
        [l2(&mut rng, &[6])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.tanh(ts[0])?;
            reduce(t, c, 14)
        }
    );
    case!(
        "gelu",
        [l2(&mut rng, &[6])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.gelu(ts[0])?;
            reduce(t, c, 15)
        }
    );
    case!(
        "sum",
        [l2(&mut rng, &[4, 3])],
        |t: &mut Tape<f64>, ts: &[Tensor]| t.sum(ts[0])
    );
    case!(
        "mean",
        [l2(&mut rng, &[4, 3])],
        |t: &mut Tape<f64>, ts: &[Tensor]| t.mean(ts[0])
    );
    case!(
        "l2norm_rows",
        [(vec![3, 4], {
            // Keep rows away from zero where the norm is not differentiable.
            let mut v = rand_vec(&mut rng, 12);
            for x in v.iter_mut() {
                *x += if *x >= 0.0 { 0.5 } else { -0.5 };
            }
            v
        })],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.l2norm_rows(ts[0])?;
            reduce(t, c, 16)
        }
    );
    case!(
        "matmul",
        [l2(&mut rng, &[4, 4]), l2(&mut rng, &[4, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.matmul(ts[0], ts[1])?;
            reduce(t, c, 17)
        }
    );
    case!(
        "matmul_flattened_leading",
        [l2(&mut rng, &[2, 3, 4]), l2(&mut rng, &[4, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.matmul(ts[0], ts[1])?;
            reduce(t, c, 18)
        }
    );
    case!(
        "matmul_tb",
        [l2(&mut rng, &[3, 4]), l2(&mut rng, &[5, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.matmul_tb(ts[0], ts[1])?;
            reduce(t, c, 19)
        }
    );
    case!(
        "add_row_bias",
        [l2(&mut rng, &[3, 4]), l2(&mut rng, &[4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.add_row_bias(ts[0], ts[1])?;
            reduce(t, c, 20)
        }
    );
    case!(
        "rmsnorm_rows",
        [l2(&mut rng, &[3, 6]), l2(&mut rng, &[6])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.rmsnorm_rows(ts[0], ts[1], 1e-6)?;
            reduce(t, c, 21)
        }
    );
    case!(
        "softmax_rows",
        [l2(&mut rng, &[3, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.softmax_rows(ts[0])?;
            reduce(t, c, 22)
        }
    );
    case!(
        "log_softmax_rows",
        [l2(&mut rng, &[3, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.log_softmax_rows(ts[0])?;
            reduce(t, c, 23)
        }
    );
    case!(
        "diagonal",
        [l2(&mut rng, &[4, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.diagonal(ts[0])?;
            reduce(t, c, 24)
        }
    );
    case!(
        "transpose2d",
        [l2(&mut rng, &[3, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.transpose2d(ts[0])?;
            reduce(t, c, 25)
        }
    );
    case!(
        "gather_rows",
        [l2(&mut rng, &[5, 3])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            // Repeated ids exercise scatter-add accumulation.
            let c = t.gather_rows(ts[0], &[0, 2, 2, 4, 1], &[5])?;
            reduce(t, c, 26)
        }
    );
    case!(
        "select_positions",
        [l2(&mut rng, &[2, 4, 3])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.select_positions(ts[0], &[3, 1])?;
            reduce(t, c, 27)
        }
    );
    case!(
        "masked_mean_rows",
        [l2(&mut rng, &[2, 4, 3])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.masked_mean_rows(ts[0], &[4, 2])?;
            reduce(t, c, 28)
        }
    );
    case!(
        "rope",
        [l2(&mut rng, &[2, 3, 8])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.rope(ts[0], 2, 10000.0)?;
            reduce(t, c, 29)
        }
    );
    case!(
        "causal_attention",
        [
            l2(&mut rng, &[2, 4, 8]),
            l2(&mut rng, &[2, 4, 8]),
            l2(&mut rng, &[2, 4, 8])
        ],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.causal_attention(ts[0], ts[1], ts[2], 2, &[4, 3])?;
            reduce(t, c, 30)
        }
    );
    case!(
        "bmm_broadcast_nt",
        [l2(&mut rng, &[3, 4]), l2(&mut rng, &[2, 5, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.bmm_broadcast_nt(ts[0], ts[1])?;
            reduce(t, c, 31)
        }
    );
    case!(
        "bmm",
        [l2(&mut rng, &[2, 3, 4]), l2(&mut rng, &[2, 4, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.bmm(ts[0], ts[1])?;
            reduce(t, c, 32)
        }
    );
    case!(
        "masked_softmax_last",
        [l2(&mut rng, &[2, 3, 5])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.masked_softmax_last(ts[0], &[5, 3])?;
            reduce(t, c, 33)
        }
    );
    case!(
        "mean_dim1",
        [l2(&mut rng, &[2, 3, 4])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.mean_dim1(ts[0])?;
            reduce(t, c, 34)
        }
    );
    case!(
        "slice_cols",
        [l2(&mut rng, &[3, 6])],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.slice_cols(ts[0], 4)?;
            reduce(t, c, 35)
        }
    );
    case!(
        "normalize_rows",
        [(vec![3, 4], {
            let mut v = rand_vec(&mut rng, 12);
            for x in v.iter_mut() {
                *x += if *x >= 0.0 { 0.5 } else { -0.5 };
            }
            v
        })],
        |t: &mut Tape<f64>, ts: &[Tensor]| {
            let c = t.normalize_rows(ts[0])?;
            reduce(t, c, 36)
        }
    );

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_standard_op_matches_finite_differences() {
        for (name, report) in check_standard_ops().unwrap() {
            assert!(
                report.max_rel_err <= 1e-3,
                "{name}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn matmul_sum_gradient_on_random_4x4_within_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let leaves = [
            (vec![4, 4], rand_vec(&mut rng, 16)),
            (vec![4, 4], rand_vec(&mut rng, 16)),
        ];
        let report = check_all(
            &leaves,
            |t, ts| {
                let c = t.matmul(ts[0], ts[1])?;
                t.sum(c)
            },
            DEFAULT_H,
            &[1e-4],
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn sampled_check_covers_requested_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = [(vec![4, 4], rand_vec(&mut rng, 16))];
        let report = check_sampled(
            &leaves,
            |t, ts| {
                let c = t.tanh(ts[0])?;
                t.sum(c)
            },
            DEFAULT_H,
            &[1e-3],
            8,
            99,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 8);
        assert!(report.pass_fraction(1e-3) == 1.0);
    }
}
