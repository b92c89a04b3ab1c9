use crate::error::{Error, Result};

/// `C(n, k)` as a float, exact for the sizes the guards admit.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// Visits every `k`-subset of `0..n` in lexicographic order.
///
/// Fails with [`Error::SizeGuard`] when there are more than `limit` subsets.
pub fn for_each_subset(n: usize, k: usize, limit: f64, mut visit: impl FnMut(&[usize])) -> Result<()> {
    let count = binomial(n, k);
    if count > limit {
        return Err(Error::SizeGuard(format!("C({n}, {k}) = {count} subsets exceeds {limit}")));
    }
    if k > n {
        return Ok(());
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return Ok(());
        }
        i -= 1;
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_all_subsets_in_order() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, 1e7, |s| seen.push(s.to_vec())).unwrap();
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        let mut n = 0;
        for_each_subset(20, 3, 1e7, |_| n += 1).unwrap();
        assert_eq!(n as f64, binomial(20, 3));
    }

    #[test]
    fn edge_sizes() {
        let mut seen = Vec::new();
        for_each_subset(3, 3, 1e7, |s| seen.push(s.to_vec())).unwrap();
        assert_eq!(seen, vec![vec![0, 1, 2]]);
        let mut count = 0;
        for_each_subset(3, 0, 1e7, |_| count += 1).unwrap();
        assert_eq!(count, 1);
    }

    #[test]
    fn guard_trips() {
        assert!(matches!(for_each_subset(60, 10, 1e7, |_| {}), Err(Error::SizeGuard(_))));
    }
}
