//! Channel-flattening attention statistics and the per-pair attention
//! discrepancy used by the distillation losses.
//!
//! An activation tensor R with C channels collapses to a 2D map
//! `A[h, w] = (1/C) * sum_i |R[i, h, w]|^p`. With p = 1 this is the plain
//! mean of absolute values; p > 1 puts more weight on strong activations.
//! The discrepancy between two maps is their mean squared difference.

use std::io::Write;
use std::path::Path;

use crate::numcore::{ops, NumError, Result, Tensor};

/// Nonnegative 2D attention map over the spatial dims of its source tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

/// Channel-flattened attention statistic of a single-sample activation
/// tensor: `A[h, w] = (1/C) * sum_i |R[i, h, w]|^p` with `p >= 1`.
pub fn attention_mean(r: &Tensor<f32>, p: f32) -> Result<AttentionMap> {
    let d = r.dims();
    if d.n != 1 {
        return Err(NumError::Shape {
            op: "attention_mean",
            detail: format!("expected a single-sample tensor, got batch {}", d.n),
        });
    }
    let flat = ops::channel_abs_pow_mean_forward(r, p)?;
    Ok(AttentionMap { h: d.h, w: d.w, data: flat.into_data() })
}

/// Mean over pixels of the squared difference of two attention maps.
pub fn attention_distance(a: &AttentionMap, b: &AttentionMap) -> Result<f32> {
    if a.h != b.h || a.w != b.w {
        return Err(NumError::Shape {
            op: "attention_distance",
            detail: format!("maps {}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        });
    }
    let mut acc = 0.0f32;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / (a.h * a.w) as f32)
}

/// Write a map as binary 8-bit PGM, min-max scaled. A constant map renders
/// as uniform mid-gray.
pub fn write_pgm(map: &AttentionMap, path: &Path) -> Result<()> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &map.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", map.w, map.h)?;
    let bytes: Vec<u8> = map
        .data
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Dims, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-2.0..2.0f32))
    }

    #[test]
    fn single_channel_p1_is_abs() {
        let r = Tensor::from_fn(Dims::new(1, 1, 2, 3), |_, _, y, x| {
            if (y + x) % 2 == 0 { -1.5 } else { 0.75 }
        });
        let a = attention_mean(&r, 1.0).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(a.at(y, x), r.at(0, 0, y, x).abs());
            }
        }
    }

    #[test]
    fn two_channel_pixel_values() {
        // channel values (1, -3): p=1 -> (1+3)/2 = 2; p=2 -> (1+9)/2 = 5
        let r = Tensor::from_fn(Dims::new(1, 2, 1, 1), |_, c, _, _| if c == 0 { 1.0 } else { -3.0 });
        assert_eq!(attention_mean(&r, 1.0).unwrap().at(0, 0), 2.0);
        assert_eq!(attention_mean(&r, 2.0).unwrap().at(0, 0), 5.0);
    }

    #[test]
    fn scaling_homogeneity_p1() {
        // attention_mean(k*R, 1) == |k| * attention_mean(R, 1)
        for seed in 0..5 {
            let r = random_tensor(Dims::new(1, 4, 5, 6), seed);
            let k = -2.5f32;
            let scaled = Tensor::new(r.dims(), r.data().iter().map(|v| v * k).collect()).unwrap();
            let a = attention_mean(&r, 1.0).unwrap();
            let b = attention_mean(&scaled, 1.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x * k.abs()).abs() <= 1e-5 * k.abs().max(1.0));
            }
        }
    }

    #[test]
    fn nonnegative_and_channel_permutation_invariant() {
        for seed in 0..10 {
            let r = random_tensor(Dims::new(1, 6, 4, 4), seed);
            let a = attention_mean(&r, 1.0).unwrap();
            assert!(a.data().iter().all(|&v| v >= 0.0));

            // Reverse the channel order.
            let d = r.dims();
            let permuted = Tensor::from_fn(d, |n, c, y, x| r.at(n, d.c - 1 - c, y, x));
            let b = attention_mean(&permuted, 1.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn p_monotonicity_on_large_and_small_values() {
        // all |values| >= 1: raising p raises the statistic; all <= 1: lowers it.
        let big = Tensor::from_fn(Dims::new(1, 3, 1, 1), |_, c, _, _| 1.5 + c as f32);
        let small = Tensor::from_fn(Dims::new(1, 3, 1, 1), |_, c, _, _| 0.2 + 0.1 * c as f32);
        let b1 = attention_mean(&big, 1.0).unwrap().at(0, 0);
        let b2 = attention_mean(&big, 2.0).unwrap().at(0, 0);
        let s1 = attention_mean(&small, 1.0).unwrap().at(0, 0);
        let s2 = attention_mean(&small, 2.0).unwrap().at(0, 0);
        assert!(b2 > b1);
        assert!(s2 < s1);
    }

    #[test]
    fn distance_zero_iff_equal_and_one_for_unit_offset() {
        let r = random_tensor(Dims::new(1, 3, 7, 5), 3);
        let a = attention_mean(&r, 1.0).unwrap();
        assert_eq!(attention_distance(&a, &a).unwrap(), 0.0);

        let shifted = AttentionMap {
            h: a.height(),
            w: a.width(),
            data: a.data().iter().map(|v| v + 1.0).collect(),
        };
        let d = attention_distance(&a, &shifted).unwrap();
        assert!((d - 1.0).abs() < 1e-5, "mean of squared ones should be 1, got {d}");

        // Nonzero whenever maps differ.
        assert!(attention_distance(&a, &shifted).unwrap() > 0.0);
    }

    #[test]
    fn distance_matches_scalar_reimplementation() {
        for seed in 0..5 {
            let ra = random_tensor(Dims::new(1, 2, 6, 9), seed);
            let rb = random_tensor(Dims::new(1, 2, 6, 9), seed + 100);
            let a = attention_mean(&ra, 1.0).unwrap();
            let b = attention_mean(&rb, 1.0).unwrap();
            let fast = attention_distance(&a, &b).unwrap();
            let mut acc = 0.0f64;
            for y in 0..6 {
                for x in 0..9 {
                    let d = (a.at(y, x) - b.at(y, x)) as f64;
                    acc += d * d;
                }
            }
            let slow = (acc / 54.0) as f32;
            assert!((fast - slow).abs() < 1e-6, "fast {fast} vs slow {slow}");
            // Symmetric in value.
            assert_eq!(fast, attention_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn distance_rejects_dim_mismatch() {
        let a = attention_mean(&random_tensor(Dims::new(1, 1, 4, 4), 0), 1.0).unwrap();
        let b = attention_mean(&random_tensor(Dims::new(1, 1, 4, 5), 0), 1.0).unwrap();
        assert!(attention_distance(&a, &b).is_err());
    }

    #[test]
    fn rejects_batched_input_and_bad_p() {
        let batched = random_tensor(Dims::new(2, 3, 4, 4), 1);
        assert!(attention_mean(&batched, 1.0).is_err());
        let single = random_tensor(Dims::new(1, 3, 4, 4), 1);
        assert!(attention_mean(&single, 0.5).is_err());
    }

    #[test]
    fn pgm_export_handles_constant_maps() {
        let dir = tempfile::tempdir().unwrap();
        let constant = AttentionMap { h: 2, w: 3, data: vec![4.0; 6] };
        let path = dir.path().join("flat.pgm");
        write_pgm(&constant, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 128));
    }
}
