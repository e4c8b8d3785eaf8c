//! Bucketed relative position bias.

/// Bucket of the signed distance `query_position - key_position`.
///
/// Half the buckets cover each sign. Distances below a quarter of
/// `num_buckets` get one bucket each; larger distances share log-spaced
/// buckets, and everything at or past `max_distance` lands in the last one.
pub fn relative_bucket(distance: isize, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let (offset, n) = if distance > 0 {
        (half, distance as usize)
    } else {
        (0, distance.unsigned_abs())
    };
    let max_exact = (half / 2).max(1);
    let bucket = if n < max_exact {
        n
    } else {
        let n = n.min(max_distance) as f64;
        let ratio = (n / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let v = max_exact as f64 + ratio * (half - max_exact) as f64;
        (v as usize).min(half - 1)
    };
    offset + bucket
}

/// `n×n` bucket table for a position-id list.
pub fn bucket_table(positions: &[usize], num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(positions.len() * positions.len());
    for &pi in positions {
        for &pj in positions {
            out.push(relative_bucket(
                pi as isize - pj as isize,
                num_buckets,
                max_distance,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_distances_are_exact() {
        for d in 0..8 {
            assert_eq!(relative_bucket(-d, 32, 128), d as usize);
            if d > 0 {
                assert_eq!(relative_bucket(d, 32, 128), 16 + d as usize);
            }
        }
    }

    #[test]
    fn saturates_at_max_distance() {
        assert_eq!(relative_bucket(128, 32, 128), 31);
        assert_eq!(relative_bucket(5000, 32, 128), 31);
        assert_eq!(relative_bucket(-128, 32, 128), 15);
        assert_eq!(relative_bucket(-5000, 32, 128), 15);
    }

    proptest! {
        #[test]
        fn depends_only_on_clipped_signed_distance(d in -1000isize..1000) {
            let clipped = d.clamp(-128, 128);
            prop_assert_eq!(relative_bucket(d, 32, 128), relative_bucket(clipped, 32, 128));
            prop_assert!(relative_bucket(d, 32, 128) < 32);
        }

        #[test]
        fn monotone_in_magnitude(a in 0isize..300, b in 0isize..300) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(relative_bucket(lo, 32, 128) <= relative_bucket(hi, 32, 128));
            prop_assert!(relative_bucket(-lo, 32, 128) <= relative_bucket(-hi, 32, 128));
        }
    }
}
