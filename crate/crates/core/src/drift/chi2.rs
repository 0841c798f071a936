use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::DriftError;
use crate::stream::FrequencyTable;

/// Chi-square homogeneity test on the 2×C table formed by two frequency
/// tables over the same categories. Categories absent from both are dropped.
pub fn chi2_two_sample(reference: &FrequencyTable, test: &FrequencyTable) -> Result<(f64, f64), DriftError> {
    let n_ref = reference.total() as f64;
    let n_test = test.total() as f64;
    let total = n_ref + n_test;
    let usable: Vec<(f64, f64)> = reference
        .categories()
        .iter()
        .map(|c| (reference.count(c) as f64, test.count(c) as f64))
        .filter(|(a, b)| a + b > 0.0)
        .collect();
    if usable.len() < 2 || n_ref == 0.0 || n_test == 0.0 {
        return Err(DriftError::DegenerateTable);
    }
    let mut statistic = 0.0;
    for &(a, b) in &usable {
        let pooled = a + b;
        let ea = pooled * n_ref / total;
        let eb = pooled * n_test / total;
        statistic += (a - ea).powi(2) / ea + (b - eb).powi(2) / eb;
    }
    let df = (usable.len() - 1) as f64;
    let dist = ChiSquared::new(df).expect("df >= 1");
    Ok((statistic, dist.sf(statistic).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(a: u64, b: u64) -> FrequencyTable {
        FrequencyTable::from_counts(["a", "b", "c"], [("a", a), ("b", b)]).unwrap()
    }

    #[test]
    fn identical_tables() {
        let (s, p) = chi2_two_sample(&table(30, 70), &table(30, 70)).unwrap();
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strongly_skewed_table() {
        let (s, p) = chi2_two_sample(&table(50, 50), &table(100, 0)).unwrap();
        assert!((s - 200.0 / 3.0).abs() < 1e-9, "{s}");
        assert!(p < 0.001);
    }

    #[test]
    fn single_usable_category() {
        assert_eq!(
            chi2_two_sample(&table(10, 0), &table(5, 0)),
            Err(DriftError::DegenerateTable)
        );
    }
}
