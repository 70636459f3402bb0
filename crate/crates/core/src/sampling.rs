//! Deterministic splittable random streams and the distributions used by
//! the optimizers: the radius-√d sphere, the radius-√d ball, and Gaussian
//! noise.
//!
//! A stream is identified by `(seed, path)`. Child streams are keyed by a
//! SHA-256 of the parent key and the label, so derivation never touches the
//! parent's draw state and any thread can rebuild a stream from its path.
//! Label conventions: `iter:<t>` for per-iteration draws, `output` for the
//! output-iterate choice, `val:<name>` for validators.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;

const ROOT_DOMAIN: &[u8] = b"dpzero/rng/v1";

/// A reproducible random stream addressed by a seed and a label path.
///
/// Not shared across threads; each thread derives its own substream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    path: Vec<String>,
    key: [u8; 32],
    rng: ChaCha20Rng,
}

impl RngStream {
    /// Root stream with an empty path.
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(ROOT_DOMAIN);
        h.update(seed.to_le_bytes());
        Self::from_key(seed, Vec::new(), h.finalize().into())
    }

    fn from_key(seed: u64, path: Vec<String>, key: [u8; 32]) -> Self {
        Self {
            seed,
            path,
            key,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// Child stream for `label`. Depends only on this stream's identity,
    /// not on how many values have been drawn from it.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        let mut path = self.path.clone();
        path.push(label.to_owned());
        Self::from_key(self.seed, path, h.finalize().into())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// `seed/label/label/...`, for diagnostics.
    pub fn path_string(&self) -> String {
        let mut s = self.seed.to_string();
        for p in &self.path {
            s.push('/');
            s.push_str(p);
        }
        s
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open_unit(&mut self) -> f64 {
        rand_distr::Distribution::<f64>::sample(&rand_distr::Open01, self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

pub fn make_rng(seed: u64) -> RngStream {
    RngStream::new(seed)
}

pub fn derive_substream(parent: &RngStream, label: &str) -> RngStream {
    parent.derive(label)
}

/// A point on the sphere of radius √d.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Wraps `u`, rescaling it onto the radius-√d sphere.
    pub fn from_vec(u: Vec<f64>) -> Result<Self> {
        let d = u.len();
        if d == 0 {
            return Err(Error::invalid("u", "empty direction"));
        }
        let nrm = linalg::norm(&u);
        if !(nrm > 0.0 && nrm.is_finite()) {
            return Err(Error::invalid("u", "direction must be finite and nonzero"));
        }
        let s = (d as f64).sqrt() / nrm;
        Ok(Self(u.into_iter().map(|v| v * s).collect()))
    }

    /// Wraps `u` as-is. Callers are responsible for the norm.
    pub fn from_raw(u: Vec<f64>) -> Self {
        Self(u)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::invalid("d", "dimension must be at least 1"))
    } else {
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")))
    }
}

/// Uniform draw from √d·S^{d-1} via a normalized standard Gaussian.
pub fn sample_sphere(d: usize, rng: &mut RngStream) -> Result<Direction> {
    check_dim(d)?;
    let scale = (d as f64).sqrt();
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let nrm = linalg::norm(&z);
        if nrm > 0.0 {
            return Ok(Direction(z.into_iter().map(|v| scale * v / nrm).collect()));
        }
    }
}

/// Uniform draw from the ball of radius √d.
pub fn sample_ball(d: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let u = sample_sphere(d, rng)?;
    let radius = rng.open_unit().powf(1.0 / d as f64);
    Ok(u.into_inner().into_iter().map(|v| v * radius).collect())
}

/// One draw from N(0, sigma²). `sigma == 0` returns exactly 0 and consumes
/// nothing.
pub fn sample_gaussian_scalar(sigma: f64, rng: &mut RngStream) -> Result<f64> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(0.0);
    }
    Ok(sigma * rng.standard_normal())
}

/// `d` i.i.d. draws from N(0, sigma²).
pub fn sample_gaussian_vector(d: usize, sigma: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_dim(d)?;
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(vec![0.0; d]);
    }
    Ok((0..d).map(|_| sigma * rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = make_rng(42);
        let mut b = make_rng(42);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        let mut c = make_rng(43);
        assert_ne!(xa[0], c.next_u64());
    }

    #[test]
    fn root_stream_is_pinned() {
        // Guards against silent changes to the derivation scheme.
        let mut a = make_rng(42);
        let first = a.next_u64();
        let mut again = make_rng(42);
        assert_eq!(first, again.next_u64());
        assert!(a.path().is_empty());
        assert_eq!(a.seed(), 42);
    }

    #[test]
    fn derivation_ignores_parent_state() {
        let root = make_rng(7);
        let mut drained = root.clone();
        for _ in 0..100 {
            drained.next_u64();
        }
        let mut c1 = root.derive("iter:0");
        let mut c2 = drained.derive("iter:0");
        assert_eq!(c1.next_u64(), c2.next_u64());
        assert_eq!(c1.path(), ["iter:0".to_string()]);
    }

    #[test]
    fn distinct_labels_distinct_streams() {
        let root = make_rng(7);
        let mut a = root.derive("iter:0");
        let mut b = root.derive("iter:1");
        assert_ne!(a.next_u64(), b.next_u64());
        let mut g1 = root.derive("iter:0").derive("sample:3");
        let mut g2 = derive_substream(&derive_substream(&root, "iter:0"), "sample:3");
        assert_eq!(g1.next_u64(), g2.next_u64());
        assert_eq!(g1.path_string(), "7/iter:0/sample:3");
    }

    #[test]
    fn label_concatenation_is_not_ambiguous() {
        let root = make_rng(1);
        let mut a = root.derive("ab").derive("c");
        let mut b = root.derive("a").derive("bc");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut rng = make_rng(0);
        assert!(sample_sphere(0, &mut rng).is_err());
        assert!(sample_ball(0, &mut rng).is_err());
        assert!(sample_gaussian_vector(0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut rng = make_rng(0);
        assert!(sample_gaussian_scalar(-1.0, &mut rng).is_err());
        assert!(sample_gaussian_vector(3, -0.5, &mut rng).is_err());
        assert!(sample_gaussian_scalar(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn zero_sigma_is_exact_zero() {
        let mut rng = make_rng(0);
        assert_eq!(sample_gaussian_scalar(0.0, &mut rng).unwrap(), 0.0);
        assert_eq!(sample_gaussian_vector(4, 0.0, &mut rng).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn one_dimensional_sphere_is_two_points() {
        let mut rng = make_rng(11);
        let n = 100_000;
        let mut plus = 0usize;
        for _ in 0..n {
            let u = sample_sphere(1, &mut rng).unwrap();
            let v = u.as_slice()[0];
            assert!(v == 1.0 || v == -1.0, "got {v}");
            if v > 0.0 {
                plus += 1;
            }
        }
        let freq = plus as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn sphere_fourth_moment_d4() {
        // E[u_i^4] = 3d/(d+2) = 2 for d = 4.
        let mut rng = make_rng(5).derive("val:fourth");
        let n = 2_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u = sample_sphere(4, &mut rng).unwrap();
            acc += u.as_slice().iter().map(|v| v.powi(4)).sum::<f64>() / 4.0;
        }
        let m = acc / n as f64;
        assert!((m - 2.0).abs() / 2.0 < 0.02, "E[u^4] = {m}");
    }

    #[test]
    fn sphere_projection_second_moment_d8() {
        let mut rng = make_rng(6);
        let n = 2_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u = sample_sphere(8, &mut rng).unwrap();
            acc += u.as_slice()[0].powi(2);
        }
        let m = acc / n as f64;
        assert!((m - 1.0).abs() < 0.01, "E[(u'e1)^2] = {m}");
    }

    #[test]
    fn ball_inner_fraction_d2() {
        // P(|v| <= sqrt(d)/2) = (1/2)^d.
        let mut rng = make_rng(8);
        let n = 1_000_000;
        let d = 2;
        let r = (d as f64).sqrt();
        let mut inside = 0usize;
        for _ in 0..n {
            let v = sample_ball(d, &mut rng).unwrap();
            let nv = linalg::norm(&v);
            assert!(nv <= r * (1.0 + 1e-12));
            if nv <= r / 2.0 {
                inside += 1;
            }
        }
        let p = inside as f64 / n as f64;
        assert!((p - 0.25).abs() / 0.25 < 0.01, "p = {p}");
    }

    #[test]
    fn ball_mean_is_zero_d3() {
        let mut rng = make_rng(9);
        let n = 200_000;
        let mut sum = [0.0; 3];
        let mut sumsq = [0.0; 3];
        for _ in 0..n {
            let v = sample_ball(3, &mut rng).unwrap();
            for k in 0..3 {
                sum[k] += v[k];
                sumsq[k] += v[k] * v[k];
            }
        }
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let var = sumsq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se, "coord {k}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn gaussian_scalar_moments() {
        let mut rng = make_rng(10);
        let n = 1_000_000;
        let mut s2 = 0.0;
        for _ in 0..n {
            let z = sample_gaussian_scalar(1.0, &mut rng).unwrap();
            s2 += z * z;
        }
        let var = s2 / n as f64;
        assert!((var - 1.0).abs() < 0.01, "var {var}");

        // Two-sided tail beyond 2 sigma: 1 - erf(sqrt 2) = 0.0455.
        let mut rng = make_rng(12);
        let mut tail = 0usize;
        for _ in 0..n {
            let z = sample_gaussian_scalar(2.0, &mut rng).unwrap();
            if z.abs() > 4.0 {
                tail += 1;
            }
        }
        let p = tail as f64 / n as f64;
        assert!((p - 0.0455).abs() < 0.005, "tail {p}");
    }

    #[test]
    fn gaussian_vector_moments() {
        let mut rng = make_rng(13);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = sample_gaussian_vector(16, 1.0, &mut rng).unwrap();
            acc += linalg::norm_sq(&z);
        }
        let m = acc / n as f64;
        assert!((m - 16.0).abs() / 16.0 < 0.01, "E|z|^2 = {m}");

        let mut rng = make_rng(14);
        let mut c = [[0.0; 2]; 2];
        for _ in 0..n {
            let z = sample_gaussian_vector(2, 3.0, &mut rng).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += z[i] * z[j];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let v = c[i][j] / n as f64;
                let target = if i == j { 9.0 } else { 0.0 };
                assert!((v - target).abs() <= 0.02 * 9.0, "cov[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn distinct_seeds_are_uncorrelated() {
        let mut a = make_rng(42);
        let mut b = make_rng(43);
        let n = 200_000;
        let mut sab = 0.0;
        for _ in 0..n {
            sab += a.standard_normal() * b.standard_normal();
        }
        let corr = sab / n as f64;
        // stderr of the product mean is 1/sqrt(n)
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn direction_from_vec_rescales() {
        let u = Direction::from_vec(vec![3.0, 4.0]).unwrap();
        assert!((linalg::norm_sq(u.as_slice()) - 2.0).abs() < 1e-12);
        assert!(Direction::from_vec(vec![0.0, 0.0]).is_err());
        assert!(Direction::from_vec(vec![]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;
        use rand::RngCore;

        proptest! {
            #[test]
            fn sphere_norm_is_exact(seed in any::<u64>(), d in 1usize..300) {
                let mut rng = make_rng(seed);
                let u = sample_sphere(d, &mut rng).unwrap();
                let n2 = linalg::norm_sq(u.as_slice());
                prop_assert!((n2 - d as f64).abs() <= 1e-9 * d as f64);
            }

            #[test]
            fn ball_support(seed in any::<u64>(), d in 1usize..64) {
                let mut rng = make_rng(seed);
                let v = sample_ball(d, &mut rng).unwrap();
                prop_assert!(linalg::norm(&v) <= (d as f64).sqrt() * (1.0 + 1e-12));
            }

            #[test]
            fn streams_reproduce(seed in any::<u64>(), label in "[a-z:0-9]{0,12}") {
                let mut a = make_rng(seed).derive(&label);
                let mut b = make_rng(seed).derive(&label);
                for _ in 0..8 {
                    prop_assert_eq!(a.next_u64(), b.next_u64());
                }
            }
        }
    }
}
