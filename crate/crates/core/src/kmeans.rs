//! Lloyd's k-means with k-means++ seeding and farthest-point reseeding of
//! empty clusters, plus the residual (level-by-level) variant.

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 20;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Clusters `points` (row-major, `dim` columns) into `k` centroids.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if k == 0 || n < k {
        return Err(Error::Init(format!("k-means needs at least {k} points, got {n}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let (a, d) = nearest(row(i), &centroids, dim);
            changed |= assign[i] != a;
            assign[i] = a;
            dist[i] = d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                dist[far] = 0.0;
                changed = true;
            } else {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

/// Fits `levels` codebooks sequentially, each on the residuals left by the
/// previous ones. Returns the codebooks and the per-point codes.
pub fn residual_kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let n = points.len() / dim.max(1);
    let mut residual = points.to_vec();
    let mut books = Vec::with_capacity(levels);
    let mut codes = vec![Vec::with_capacity(levels); n];
    for _ in 0..levels {
        let c = kmeans(&residual, dim, k, MAX_ITERS, rng)?;
        for (i, r) in residual.chunks_exact_mut(dim).enumerate() {
            let (a, _) = nearest(r, &c, dim);
            codes[i].push(a);
            for (x, y) in r.iter_mut().zip(&c[a * dim..(a + 1) * dim]) {
                *x -= y;
            }
        }
        books.push(c);
    }
    Ok((books, codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn distinct_points_become_centroids() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 5.0, 3.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = kmeans(&pts, 2, 4, MAX_ITERS, &mut rng).unwrap();
        let mut got: Vec<(i64, i64)> = c.chunks(2).map(|p| ((p[0] * 1e6) as i64, (p[1] * 1e6) as i64)).collect();
        let mut want: Vec<(i64, i64)> = pts.chunks(2).map(|p| ((p[0] * 1e6) as i64, (p[1] * 1e6) as i64)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn identical_points_are_defined() {
        let pts = vec![2.0; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = kmeans(&pts, 2, 3, MAX_ITERS, &mut rng).unwrap();
        assert!(c.iter().all(|&x| x == 2.0));
    }

    #[test]
    fn too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(kmeans(&[1.0, 2.0], 1, 3, 5, &mut rng), Err(Error::Init(_))));
    }

    #[test]
    fn two_blobs_recovered() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.3).unwrap();
            let means = [[-3.0, 1.0], [4.0, -2.0]];
            let mut pts = Vec::new();
            for i in 0..400 {
                let m = means[i % 2];
                pts.push(m[0] + noise.sample(&mut rng));
                pts.push(m[1] + noise.sample(&mut rng));
            }
            let c = kmeans(&pts, 2, 2, MAX_ITERS, &mut rng).unwrap();
            for m in means {
                let (_, d) = nearest(&m, &c, 2);
                assert!(d.sqrt() < 0.1, "seed {seed}: blob mean {m:?} off by {}", d.sqrt());
            }
        }
    }

    #[test]
    fn nearest_prefers_lowest_index() {
        let c = [1.0, 0.0, -1.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &c, 2).0, 0);
    }
}
