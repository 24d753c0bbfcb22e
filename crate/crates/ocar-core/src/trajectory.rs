//! 2D loss-landscape projection of training trajectories: the plane through
//! three parameter snapshots (initialization, end of first task, final
//! model), orthonormalized directions, model coordinates in that plane, and
//! loss-surface grids per task.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::{to_batch, Example};
use crate::nn::Network;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("projection directions are degenerate (residual norm {residual:.3e})")]
    DegenerateDirections { residual: f64 },
    #[error("grid needs at least 2 cells per axis, got {nx}x{ny}")]
    BadResolution { nx: usize, ny: usize },
}

/// Orthonormal 2D coordinate system in parameter space anchored at `origin`.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    pub origin: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ProjectionBasis {
    /// Plane through `w0` (origin), `w1`, and `w_n`: û is the normalized
    /// `w1 − w0`, v̂ is `w_n − w0` with its û component projected out, then
    /// normalized.
    pub fn build(w0: &[f64], w1: &[f64], w_n: &[f64]) -> Result<Self, TrajectoryError> {
        assert_eq!(w0.len(), w1.len());
        assert_eq!(w0.len(), w_n.len());
        let u: Vec<f64> = w1.iter().zip(w0).map(|(a, b)| a - b).collect();
        let u_norm = norm(&u);
        if u_norm < 1e-10 {
            return Err(TrajectoryError::DegenerateDirections { residual: u_norm });
        }
        let u_hat: Vec<f64> = u.iter().map(|x| x / u_norm).collect();
        let v: Vec<f64> = w_n.iter().zip(w0).map(|(a, b)| a - b).collect();
        let proj = dot(&v, &u_hat);
        let resid: Vec<f64> = v
            .iter()
            .zip(&u_hat)
            .map(|(vi, ui)| vi - proj * ui)
            .collect();
        let r_norm = norm(&resid);
        if r_norm < 1e-10 {
            return Err(TrajectoryError::DegenerateDirections { residual: r_norm });
        }
        let v_hat: Vec<f64> = resid.iter().map(|x| x / r_norm).collect();
        Ok(ProjectionBasis {
            origin: w0.to_vec(),
            u_hat,
            v_hat,
        })
    }

    /// Plane coordinates of `w`: `((w−w0)·û, (w−w0)·v̂)`.
    pub fn coords(&self, w: &[f64]) -> (f64, f64) {
        let diff: Vec<f64> = w.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        (dot(&diff, &self.u_hat), dot(&diff, &self.v_hat))
    }

    /// Parameter vector at plane coordinates `(x, y)`.
    pub fn point_at(&self, x: f64, y: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(self.u_hat.iter().zip(&self.v_hat))
            .map(|(o, (u, v))| o + x * u + y * v)
            .collect()
    }
}

/// Rectangular grid specification over the projection plane.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Grid covering `points` scaled out from the bounding-box center.
    pub fn covering(points: &[(f64, f64)], scale: f64, nx: usize, ny: usize) -> GridSpec {
        assert!(!points.is_empty());
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        let expand = |lo: f64, hi: f64| -> (f64, f64) {
            let c = (lo + hi) / 2.0;
            let h = ((hi - lo) / 2.0).max(1e-3);
            (c - scale * h, c + scale * h)
        };
        let (x_min, x_max) = expand(x_lo, x_hi);
        let (y_min, y_max) = expand(y_lo, y_hi);
        GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            nx,
            ny,
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Loss values over the grid, one sheet per task plus their average.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `task_losses[t][iy * nx + ix]`
    pub task_losses: Vec<Vec<f64>>,
    pub avg_loss: Vec<f64>,
}

impl SurfaceGrid {
    /// Grid indices of the cell with the lowest average loss.
    pub fn argmin_avg(&self) -> (usize, usize) {
        let nx = self.xs.len();
        let mut best = (0, 0);
        let mut best_v = f64::INFINITY;
        for iy in 0..self.ys.len() {
            for ix in 0..nx {
                let v = self.avg_loss[iy * nx + ix];
                if v < best_v {
                    best_v = v;
                    best = (ix, iy);
                }
            }
        }
        best
    }
}

/// Evaluate each task's eval loss over the plane.
///
/// For every cell, parameters `w0 + x·û + y·v̂` are loaded into a copy of the
/// template network and each task's eval loss is recorded (written in
/// deterministic cell order).
pub fn surface(
    basis: &ProjectionBasis,
    grid: &GridSpec,
    eval_sets: &[&[Example]],
    net_template: &Network,
) -> Result<SurfaceGrid, TrajectoryError> {
    if grid.nx < 2 || grid.ny < 2 {
        return Err(TrajectoryError::BadResolution {
            nx: grid.nx,
            ny: grid.ny,
        });
    }
    let xs = grid.xs();
    let ys = grid.ys();
    let batches: Vec<_> = eval_sets.iter().map(|s| to_batch(s)).collect();
    let mut task_losses = vec![vec![0.0; xs.len() * ys.len()]; eval_sets.len()];
    let mut avg_loss = vec![0.0; xs.len() * ys.len()];
    let mut net = net_template.clone();
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let params = basis.point_at(x, y);
            net.load_flat(&params).expect("basis dims match template");
            let mut total = 0.0;
            for (t, (inputs, targets)) in batches.iter().enumerate() {
                let loss = net.loss_value(inputs, targets).expect("eval shapes match");
                task_losses[t][iy * xs.len() + ix] = loss;
                total += loss;
            }
            avg_loss[iy * xs.len() + ix] = total / eval_sets.len() as f64;
        }
    }
    Ok(SurfaceGrid {
        xs,
        ys,
        task_losses,
        avg_loss,
    })
}

/// CSV dump: `x,y,loss_task_0,…,avg`.
pub fn write_surface_csv(grid: &SurfaceGrid, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    let header: Vec<String> = ["x".to_string(), "y".to_string()]
        .into_iter()
        .chain((0..grid.task_losses.len()).map(|t| format!("loss_task_{t}")))
        .chain(std::iter::once("loss_avg".to_string()))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (iy, &y) in grid.ys.iter().enumerate() {
        for (ix, &x) in grid.xs.iter().enumerate() {
            let mut cells = vec![format!("{x}"), format!("{y}")];
            for t in &grid.task_losses {
                cells.push(format!("{}", t[iy * grid.xs.len() + ix]));
            }
            cells.push(format!("{}", grid.avg_loss[iy * grid.xs.len() + ix]));
            writeln!(f, "{}", cells.join(","))?;
        }
    }
    Ok(())
}

/// CSV dump of a projected trajectory: `step,x,y`.
pub fn write_trajectory_csv(points: &[(usize, f64, f64)], path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,x,y")?;
    for (step, x, y) in points {
        writeln!(f, "{step},{x},{y}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HeadKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn orthogonal_anchors_give_axes() {
        let w0 = vec![0.0; 4];
        let w1 = unit(4, 0);
        let wn = unit(4, 1);
        let b = ProjectionBasis::build(&w0, &w1, &wn).unwrap();
        assert_eq!(b.u_hat, unit(4, 0));
        assert_eq!(b.v_hat, unit(4, 1));
    }

    #[test]
    fn gram_schmidt_hand_case() {
        // u = e1, v = e1 + e2: the û component is projected out of v
        let w0 = vec![0.0; 3];
        let w1 = unit(3, 0);
        let wn = vec![1.0, 1.0, 0.0];
        let b = ProjectionBasis::build(&w0, &w1, &wn).unwrap();
        assert_eq!(b.u_hat, unit(3, 0));
        for (i, v) in b.v_hat.iter().enumerate() {
            let expect = if i == 1 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_directions_rejected() {
        let w0 = vec![0.0; 3];
        let w1 = unit(3, 0);
        let wn: Vec<f64> = w1.iter().map(|x| 2.0 * x).collect();
        assert!(matches!(
            ProjectionBasis::build(&w0, &w1, &wn),
            Err(TrajectoryError::DegenerateDirections { .. })
        ));
        assert!(matches!(
            ProjectionBasis::build(&w0, &w0, &wn),
            Err(TrajectoryError::DegenerateDirections { .. })
        ));
    }

    #[test]
    fn high_dim_orthonormal_and_anchors_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [10usize, 100, 1000, 10_000] {
            let w0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wn: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = ProjectionBasis::build(&w0, &w1, &wn).unwrap();
            assert!((norm(&b.u_hat) - 1.0).abs() <= 1e-12);
            assert!((norm(&b.v_hat) - 1.0).abs() <= 1e-12);
            assert!(dot(&b.u_hat, &b.v_hat).abs() <= 1e-12);
            // both non-origin anchors lie in the plane and reconstruct
            for anchor in [&w1, &wn] {
                let (x, y) = b.coords(anchor);
                let rec = b.point_at(x, y);
                let err = anchor
                    .iter()
                    .zip(&rec)
                    .map(|(a, r)| (a - r) * (a - r))
                    .sum::<f64>()
                    .sqrt();
                assert!(err <= 1e-8, "dim {dim}: reconstruction error {err:.3e}");
            }
        }
    }

    #[test]
    fn coords_of_origin_and_axis_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 50;
        let w0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wn: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = ProjectionBasis::build(&w0, &w1, &wn).unwrap();
        let (x0, y0) = b.coords(&w0);
        assert!(x0.abs() < 1e-12 && y0.abs() < 1e-12);
        let u_len = norm(
            &w1.iter()
                .zip(&w0)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        );
        let (x1, y1) = b.coords(&w1);
        assert!((x1 - u_len).abs() <= 1e-10);
        assert!(y1.abs() <= 1e-10);
        // w0 + 2û lands at (2, 0)
        let p: Vec<f64> = w0.iter().zip(&b.u_hat).map(|(o, u)| o + 2.0 * u).collect();
        let (x, y) = b.coords(&p);
        assert!((x - 2.0).abs() <= 1e-12 && y.abs() <= 1e-12);
        // in-plane points reconstruct tightly
        let q = b.point_at(0.7, -1.3);
        let (qx, qy) = b.coords(&q);
        let rec = b.point_at(qx, qy);
        for (a, r) in q.iter().zip(&rec) {
            assert!((a - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn surface_rejects_single_cell_axis() {
        let net = Network::linear_model(2, 1, HeadKind::GaussianMSE);
        let w = net.flatten();
        let mut w1 = w.clone();
        w1[0] += 1.0;
        let mut wn = w.clone();
        wn[1] += 1.0;
        let b = ProjectionBasis::build(&w, &w1, &wn).unwrap();
        let grid = GridSpec {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            nx: 1,
            ny: 5,
        };
        let eval = vec![Example::regression(vec![1.0, 0.0], vec![0.0])];
        let sets: Vec<&[Example]> = vec![&eval];
        assert!(matches!(
            surface(&b, &grid, &sets, &net),
            Err(TrajectoryError::BadResolution { nx: 1, ny: 5 })
        ));
    }

    #[test]
    fn surface_cell_reproduces_snapshot_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::linear_model(3, 1, HeadKind::GaussianMSE);
        let dim = net.num_params();
        let w0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wn: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = ProjectionBasis::build(&w0, &w1, &wn).unwrap();

        let eval: Vec<Example> = (0..12)
            .map(|_| {
                Example::regression(
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    vec![rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let sets: Vec<&[Example]> = vec![&eval];

        // grid that contains w1's exact plane coordinates as a node
        let (x1, y1) = b.coords(&w1);
        let grid = GridSpec {
            x_min: x1 - 1.0,
            x_max: x1 + 1.0,
            y_min: y1 - 1.0,
            y_max: y1 + 1.0,
            nx: 3,
            ny: 3,
        };
        let surf = surface(&b, &grid, &sets, &net).unwrap();
        // center cell (1,1) is exactly (x1, y1)
        let got = surf.task_losses[0][3 + 1];
        let mut snap = net.clone();
        snap.load_flat(&w1).unwrap();
        let (inputs, targets) = to_batch(&eval);
        let direct = snap.loss_value(&inputs, &targets).unwrap();
        assert!(
            (got - direct).abs() <= 1e-9,
            "cell {got:.12} vs direct {direct:.12}"
        );
    }

    #[test]
    fn convex_surface_minimum_adjacent_to_plane_optimum() {
        // quadratic loss restricted to the plane: the grid argmin must land
        // next to the closed-form in-plane minimizer
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = Network::linear_model(4, 1, HeadKind::GaussianMSE);
        let dim = net.num_params();
        let w0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wn: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let basis = ProjectionBasis::build(&w0, &w1, &wn).unwrap();

        let eval: Vec<Example> = (0..60)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = x.iter().sum::<f64>() * 0.5 + rng.gen_range(-0.05..0.05);
                Example::regression(x, vec![y])
            })
            .collect();
        let sets: Vec<&[Example]> = vec![&eval];

        // closed-form in-plane optimum: loss(x, y) is quadratic in (x, y);
        // solve the 2x2 normal equations built from directional statistics
        let (inputs, targets) = to_batch(&eval);
        let residual_at = |x: f64, y: f64| -> f64 {
            let mut m = net.clone();
            m.load_flat(&basis.point_at(x, y)).unwrap();
            m.loss_value(&inputs, &targets).unwrap()
        };
        // quadratic fit by finite differencing the exact quadratic
        let f00 = residual_at(0.0, 0.0);
        let h = 0.5;
        let fx = (residual_at(h, 0.0) - residual_at(-h, 0.0)) / (2.0 * h);
        let fy = (residual_at(0.0, h) - residual_at(0.0, -h)) / (2.0 * h);
        let fxx = (residual_at(h, 0.0) - 2.0 * f00 + residual_at(-h, 0.0)) / (h * h);
        let fyy = (residual_at(0.0, h) - 2.0 * f00 + residual_at(0.0, -h)) / (h * h);
        let fxy = (residual_at(h, h) - residual_at(h, -h) - residual_at(-h, h)
            + residual_at(-h, -h))
            / (4.0 * h * h);
        let det = fxx * fyy - fxy * fxy;
        let opt_x = (-fx * fyy + fy * fxy) / det;
        let opt_y = (-fy * fxx + fx * fxy) / det;

        let grid = GridSpec {
            x_min: opt_x - 2.0,
            x_max: opt_x + 2.0,
            y_min: opt_y - 2.0,
            y_max: opt_y + 2.0,
            nx: 21,
            ny: 21,
        };
        let surf = surface(&basis, &grid, &sets, &net).unwrap();
        let (ix, iy) = surf.argmin_avg();
        let cell_x = surf.xs[ix];
        let cell_y = surf.ys[iy];
        let dxc = (grid.x_max - grid.x_min) / 20.0;
        let dyc = (grid.y_max - grid.y_min) / 20.0;
        assert!(
            (cell_x - opt_x).abs() <= dxc + 1e-9 && (cell_y - opt_y).abs() <= dyc + 1e-9,
            "argmin ({cell_x:.3},{cell_y:.3}) vs optimum ({opt_x:.3},{opt_y:.3})"
        );
    }

    #[test]
    fn csv_dumps_have_expected_shape() {
        let dir = std::env::temp_dir().join("ocar_traj_csv_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let grid = SurfaceGrid {
            xs: vec![0.0, 1.0],
            ys: vec![0.0, 1.0],
            task_losses: vec![vec![1.0, 2.0, 3.0, 4.0]],
            avg_loss: vec![1.0, 2.0, 3.0, 4.0],
        };
        let p = dir.join("surface.csv");
        write_surface_csv(&grid, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("x,y,loss_task_0,loss_avg\n"));
        let p2 = dir.join("traj.csv");
        write_trajectory_csv(&[(0, 0.0, 0.0), (10, 1.5, -0.5)], &p2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p2).unwrap(),
            "step,x,y\n0,0,0\n10,1.5,-0.5\n"
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
