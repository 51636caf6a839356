//! Halton points via radical inverses in prime bases.

/// The first 64 primes; coordinate `j` of a Halton point uses base `PRIMES[j]`.
pub const PRIMES: [u64; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311,
];

/// Van der Corput radical inverse of `index` in `base`: the base-`base` digits
/// of `index` mirrored about the radix point.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv_base;
    }
    out
}

/// Halton points `0..count` in `dim` dimensions, row-major.
pub fn halton_points(count: usize, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len());
    let mut out = Vec::with_capacity(count * dim);
    for i in 0..count as u64 {
        for &base in &PRIMES[..dim] {
            out.push(radical_inverse(i, base));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit_reversal_oracle(index: u64, base: u64) -> f64 {
        // Collect digits, then evaluate sum d_k base^-(k+1) with exact integer
        // arithmetic for the numerator.
        let mut digits = Vec::new();
        let mut i = index;
        while i > 0 {
            digits.push(i % base);
            i /= base;
        }
        let mut num: u64 = 0;
        for &d in &digits {
            num = num * base + d;
        }
        num as f64 / base.pow(digits.len() as u32) as f64
    }

    #[test]
    fn base_two_values() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(0, 2), 0.0);
    }

    #[test]
    fn matches_digit_reversal() {
        for &b in &PRIMES[..8] {
            for i in 0..500 {
                let a = radical_inverse(i, b);
                let o = digit_reversal_oracle(i, b);
                assert!((a - o).abs() < 1e-14, "base {b} index {i}: {a} vs {o}");
                assert!((0.0..1.0).contains(&a));
            }
        }
    }

    #[test]
    fn first_points_of_base_two_stratify() {
        let pts = halton_points(8, 1);
        let mut bins: Vec<usize> = pts.iter().map(|x| (x * 8.0) as usize).collect();
        bins.sort_unstable();
        assert_eq!(bins, (0..8).collect::<Vec<_>>());
    }
}
