//! Reproducible random streams for path simulation.
//!
//! Every path owns independent ChaCha8 streams, one per Brownian dimension,
//! keyed by `(seed, dimension)` with the path index as the stream id. The
//! draws of path `i` are therefore a pure function of `(seed, i)` and never
//! depend on how paths are scheduled across threads.
//!
//! Increments are assembled by a Brownian bridge over the time grid: the
//! coarse skeleton consumes the first normals and finer levels the later
//! ones. A grid with twice the steps reproduces every point of the coarser
//! grid from the same draws, which couples step-halving experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Result};

fn mix(seed: u64, dim: u32) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ (u64::from(dim).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, path, dim)`.
pub fn path_stream(seed: u64, path: u64, dim: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, dim));
    rng.set_stream(path);
    rng
}

pub fn fill_normals(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

#[derive(Debug, Clone, Copy)]
struct BridgeStep {
    mid: usize,
    left: usize,
    right: usize,
    w_left: f64,
    w_right: f64,
    sd: f64,
}

/// Brownian bridge construction over a fixed time grid.
#[derive(Debug, Clone)]
pub struct BrownianBridge {
    times: Vec<f64>,
    base_stride: usize,
    base_sd: Vec<f64>,
    steps: Vec<BridgeStep>,
}

impl BrownianBridge {
    /// `times` must start at 0 and be strictly increasing.
    pub fn new(times: &[f64]) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("bridge grid must start at 0 and increase strictly");
        }
        let m = times.len() - 1;
        let stride = 1usize << m.trailing_zeros();
        let base_sd = (0..m / stride)
            .map(|j| (times[(j + 1) * stride] - times[j * stride]).sqrt())
            .collect();
        let mut steps = Vec::with_capacity(m - m / stride);
        let mut width = stride;
        while width > 1 {
            let half = width / 2;
            let mut left = 0;
            while left < m {
                let right = left + width;
                let mid = left + half;
                let (tl, tm, tr) = (times[left], times[mid], times[right]);
                steps.push(BridgeStep {
                    mid,
                    left,
                    right,
                    w_left: (tr - tm) / (tr - tl),
                    w_right: (tm - tl) / (tr - tl),
                    sd: ((tm - tl) * (tr - tm) / (tr - tl)).sqrt(),
                });
                left = right;
            }
            width = half;
        }
        Ok(Self {
            times: times.to_vec(),
            base_stride: stride,
            base_sd,
            steps,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Writes the Brownian increments `W(t_{j+1}) - W(t_j)` built from
    /// `normals` (length `n_steps`) into `increments`. `path` is scratch of
    /// length `n_steps + 1`.
    pub fn increments(&self, normals: &[f64], path: &mut [f64], increments: &mut [f64]) {
        let m = self.n_steps();
        debug_assert!(normals.len() == m && path.len() == m + 1 && increments.len() == m);
        path[0] = 0.0;
        let nb = self.base_sd.len();
        for j in 0..nb {
            path[(j + 1) * self.base_stride] =
                path[j * self.base_stride] + self.base_sd[j] * normals[j];
        }
        for (s, z) in self.steps.iter().zip(&normals[nb..]) {
            path[s.mid] = s.w_left * path[s.left] + s.w_right * path[s.right] + s.sd * z;
        }
        for j in 0..m {
            increments[j] = path[j + 1] - path[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        fill_normals(&mut path_stream(7, 3, 0), &mut a);
        fill_normals(&mut path_stream(7, 3, 0), &mut b);
        assert_eq!(a, b);
        fill_normals(&mut path_stream(7, 4, 0), &mut b);
        assert_ne!(a, b);
        fill_normals(&mut path_stream(7, 3, 1), &mut b);
        assert_ne!(a, b);
        fill_normals(&mut path_stream(8, 3, 0), &mut b);
        assert_ne!(a, b);
    }

    fn uniform(m: usize, t: f64) -> Vec<f64> {
        (0..=m).map(|i| t * i as f64 / m as f64).collect()
    }

    #[test]
    fn bridge_refinement_reuses_coarse_points() {
        let coarse = BrownianBridge::new(&uniform(12, 1.0)).unwrap();
        let fine = BrownianBridge::new(&uniform(24, 1.0)).unwrap();
        let mut z = vec![0.0; 24];
        fill_normals(&mut path_stream(1, 0, 0), &mut z);
        let (mut pc, mut ic) = (vec![0.0; 13], vec![0.0; 12]);
        let (mut pf, mut inf) = (vec![0.0; 25], vec![0.0; 24]);
        coarse.increments(&z[..12], &mut pc, &mut ic);
        fine.increments(&z, &mut pf, &mut inf);
        for j in 0..=12 {
            assert!((pc[j] - pf[2 * j]).abs() < 1e-14, "point {j}");
        }
    }

    #[test]
    fn bridge_increments_have_unit_rate_variance() {
        let times = uniform(16, 2.0);
        let bridge = BrownianBridge::new(&times).unwrap();
        let n = 20_000;
        let mut sum_sq = vec![0.0; 16];
        let mut cross = 0.0;
        let (mut z, mut p, mut inc) = (vec![0.0; 16], vec![0.0; 17], vec![0.0; 16]);
        for path in 0..n {
            fill_normals(&mut path_stream(11, path, 0), &mut z);
            bridge.increments(&z, &mut p, &mut inc);
            for j in 0..16 {
                sum_sq[j] += inc[j] * inc[j];
            }
            cross += inc[3] * inc[4];
        }
        for s in sum_sq {
            // variance 0.125 per step; stderr of the estimate is 0.125*sqrt(2/n)
            assert!((s / n as f64 - 0.125).abs() < 5.0 * 0.125 * (2.0 / n as f64).sqrt());
        }
        assert!((cross / n as f64).abs() < 5.0 * 0.125 / (n as f64).sqrt());
    }
}
