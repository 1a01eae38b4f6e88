use super::Sample;

/// Median-frequency class balancing: `w_c = median(freq) / freq_c` over classes that
/// occur, where `freq_c` is the share of all pixels labelled `c`. Absent classes get 0.
pub fn class_pixel_weights<'a>(samples: impl IntoIterator<Item = &'a Sample>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &l in &s.mask {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    weights_from_counts(&counts)
}

pub fn weights_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 {
        present[n / 2]
    } else {
        0.5 * (present[n / 2 - 1] + present[n / 2])
    };
    freq.iter().map(|&f| if f > 0.0 { median / f } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_frequencies_give_unit_weights() {
        assert_eq!(weights_from_counts(&[5, 5, 5]), vec![1.0; 3]);
    }

    #[test]
    fn rare_class_is_upweighted() {
        let w = weights_from_counts(&[90, 10, 0]);
        // median of {0.9, 0.1} is 0.5
        assert!((w[0] - 0.5 / 0.9).abs() < 1e-12);
        assert!((w[1] - 5.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }
}
