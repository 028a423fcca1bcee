/// Picks at most `cap` slice indices spread evenly over `0..n_total`,
/// always keeping both ends. `idx_k = floor(k·(n−1)/(cap−1))`.
pub fn sample_equidistant(n_total: usize, cap: usize) -> Vec<usize> {
    if n_total <= cap {
        return (0..n_total).collect();
    }
    match cap {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let span = (n_total - 1) as u128;
            let steps = (cap - 1) as u128;
            (0..cap as u128)
                .map(|k| (k * span / steps) as usize)
                .collect()
        }
    }
}
