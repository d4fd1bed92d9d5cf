//! Point-sampled surface distances: Chamfer, Hausdorff, MAD and RMSE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{TriangleMesh, DEGENERATE_AREA};
use crate::linalg::Vec3;
use crate::real::Real;

/// Default number of surface samples per mesh.
pub const DEFAULT_SAMPLES: usize = 30_000;

/// Distance summary between a prediction and a reference surface.
///
/// `cd` is the halved sum of the two directed mean distances; `mad` and
/// `rmse` pool the nearest-neighbour distances from both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    pub hd: f64,
    pub mad: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Placeholder for a prediction with no surface at all.
    pub fn unbounded(n_points: usize, seed: u64) -> Self {
        Self { cd: f64::INFINITY, hd: f64::INFINITY, mad: f64::INFINITY, rmse: f64::INFINITY, n_points, seed }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { cd: self.cd * s, hd: self.hd * s, mad: self.mad * s, rmse: self.rmse * s, ..*self }
    }

    pub const CSV_HEADER: &'static str = "phantom,method,fraction,cd,hd,mad,rmse,seed";

    pub fn csv_row(&self, phantom: &str, method: &str, fraction: f64) -> String {
        format!("{phantom},{method},{fraction},{},{},{},{},{}", self.cd, self.hd, self.mad, self.rmse, self.seed)
    }
}

/// Area-weighted uniform samples on the surface. Zero-area triangles are
/// never chosen.
pub fn sample_surface<T: Real>(mesh: &TriangleMesh<T>, n: usize, seed: u64) -> Result<Vec<Vec3<f64>>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mesh = mesh.cast::<f64>();
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let a = mesh.triangle_area(t);
        if a > DEGENERATE_AREA {
            total += a;
        }
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("cannot sample an empty or zero-area mesh"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let [a, b, c] = mesh.corners(t);
            let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            a + (b - a) * r1 + (c - a) * r2
        })
        .collect())
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).fold(0.0, |acc, d| acc + (a[d] - b[d]) * (a[d] - b[d]))
}

/// Nearest-neighbour distances from every point of `from` to the set `to`.
///
/// # Panics
/// If `to` is empty.
pub fn nearest_distances(from: &[Vec3<f64>], to: &[Vec3<f64>]) -> Vec<f64> {
    let tree = RTree::bulk_load(to.iter().map(|v| v.as_array()).collect());
    from.iter()
        .map(|p| {
            let q = p.as_array();
            let nn = tree.nearest_neighbor(&q).expect("target set is nonempty");
            squared_distance(&q, nn).sqrt()
        })
        .collect()
}

/// Metrics from two directed distance lists.
pub fn summarize(p_to_g: &[f64], g_to_p: &[f64], seed: u64) -> MetricsReport {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    let pooled = (p_to_g.len() + g_to_p.len()) as f64;
    let abs_sum: f64 = p_to_g.iter().chain(g_to_p).sum();
    let sq_sum: f64 = p_to_g.iter().chain(g_to_p).map(|d| d * d).sum();
    MetricsReport {
        cd: 0.5 * (mean(p_to_g) + mean(g_to_p)),
        hd: max(p_to_g).max(max(g_to_p)),
        mad: abs_sum / pooled,
        rmse: (sq_sum / pooled).sqrt(),
        n_points: p_to_g.len().max(g_to_p.len()),
        seed,
    }
}

/// Distances between two point sets.
///
/// # Panics
/// If either set is empty.
pub fn compute_metrics(pred: &[Vec3<f64>], gt: &[Vec3<f64>]) -> MetricsReport {
    assert!(!pred.is_empty() && !gt.is_empty(), "metric point sets must be nonempty");
    summarize(&nearest_distances(pred, gt), &nearest_distances(gt, pred), 0)
}

/// Samples both meshes with `n` points each and compares them. Both use the
/// same seed, so a mesh compared with itself scores exactly zero.
pub fn mesh_metrics<T: Real, U: Real>(
    pred: &TriangleMesh<T>,
    gt: &TriangleMesh<U>,
    n: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let p = sample_surface(pred, n, seed)?;
    let g = sample_surface(gt, n, seed)?;
    Ok(MetricsReport { n_points: n, seed, ..compute_metrics(&p, &g) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(from: &[Vec3<f64>], to: &[Vec3<f64>]) -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let (a, b) = (p.as_array(), q.as_array());
                        (0..3).fold(0.0, |acc, d| acc + (a[d] - b[d]) * (a[d] - b[d]))
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    fn cloud(n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
    }

    fn square() -> TriangleMesh<f64> {
        TriangleMesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = cloud(100, 1);
        let r = compute_metrics(&a, &a);
        assert_eq!((r.cd, r.hd, r.mad, r.rmse), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_pair_gives_distance() {
        let r = compute_metrics(&[Vec3::new(1.0, 0.0, 0.0)], &[Vec3::new(1.0, 3.0, 4.0)]);
        assert_eq!([r.cd, r.hd, r.mad, r.rmse], [5.0; 4]);
    }

    #[test]
    fn tree_matches_brute_force_exactly() {
        for s in 0..20 {
            let (a, b) = (cloud(200, 2 * s), cloud(200, 2 * s + 1));
            let fast = compute_metrics(&a, &b);
            let slow = summarize(&brute(&a, &b), &brute(&b, &a), 0);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn duplicate_points_are_handled() {
        let mut a = vec![Vec3::new(0.25, 0.25, 0.25); 300];
        a.extend(cloud(50, 9));
        let b = cloud(80, 10);
        assert_eq!(nearest_distances(&b, &a), brute(&b, &a));
        // Coplanar samples, as produced by flat mesh faces.
        let flat: Vec<_> = cloud(5000, 11).into_iter().map(|v| Vec3::new(v.x, v.y, 0.0)).collect();
        assert_eq!(nearest_distances(&b, &flat), brute(&b, &flat));
    }

    #[test]
    fn symmetric_and_scale_equivariant() {
        let (a, b) = (cloud(150, 3), cloud(170, 4));
        let (ab, ba) = (compute_metrics(&a, &b), compute_metrics(&b, &a));
        assert_eq!(ab.hd, ba.hd);
        assert!((ab.cd - ba.cd).abs() < 1e-15 && (ab.mad - ba.mad).abs() < 1e-15 && (ab.rmse - ba.rmse).abs() < 1e-15);
        let s = 7.5;
        let scaled = compute_metrics(&a.iter().map(|&v| v * s).collect::<Vec<_>>(), &b.iter().map(|&v| v * s).collect::<Vec<_>>());
        let expect = ab.scaled(s);
        for (x, y) in [(scaled.cd, expect.cd), (scaled.hd, expect.hd), (scaled.mad, expect.mad), (scaled.rmse, expect.rmse)] {
            assert!((x - y).abs() <= 1e-12 * y);
        }
        assert!(ab.hd >= ab.mad && ab.rmse >= ab.mad);
    }

    #[test]
    fn single_triangle_sample_is_inside() {
        let mesh = TriangleMesh { vertices: square().vertices, triangles: vec![[0, 1, 2]] };
        let p = sample_surface(&mesh, 1, 5).unwrap()[0];
        assert!(p.z == 0.0 && p.y >= 0.0 && p.x <= 1.0 && p.y <= p.x);
    }

    #[test]
    fn area_weighting_split() {
        // Triangles of area 0.5 and 0.25.
        let mesh = TriangleMesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 0.5, 0.0)],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let n = 100_000;
        let pts = sample_surface(&mesh, n, 11).unwrap();
        let first = pts.iter().filter(|p| p.y <= p.x).count() as f64 / n as f64;
        assert!((first - 2.0 / 3.0).abs() < 0.02 * 2.0 / 3.0, "{first}");
        let sq = sample_surface(&square(), n, 12).unwrap();
        let lower = sq.iter().filter(|p| p.y <= p.x).count() as f64 / n as f64;
        assert!((lower - 0.5).abs() < 0.01);
    }

    #[test]
    fn degenerate_triangles_are_skipped() {
        let mut mesh = square();
        mesh.vertices.push(Vec3::new(5.0, 5.0, 5.0));
        mesh.triangles.push([4, 4, 4]);
        let pts = sample_surface(&mesh, 5000, 1).unwrap();
        assert!(pts.iter().all(|p| p.x <= 1.0 && p.y <= 1.0));
        assert!(sample_surface(&TriangleMesh::<f64>::default(), 10, 0).is_err());
        assert!(sample_surface(&TriangleMesh { triangles: vec![[4, 4, 4]], ..mesh.clone() }, 10, 0).is_err());
        assert!(sample_surface(&square(), 0, 0).is_err());
        assert_eq!(sample_surface(&square(), 50, 3).unwrap(), sample_surface(&square(), 50, 3).unwrap());
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricsReport { cd: 1.0, hd: 2.0, mad: 0.5, rmse: 0.75, n_points: 10, seed: 4 };
        assert_eq!(r.csv_row("A", "UltrON", 0.1), "A,UltrON,0.1,1,2,0.5,0.75,4");
        assert_eq!(MetricsReport::CSV_HEADER.split(',').count(), 8);
    }
}
