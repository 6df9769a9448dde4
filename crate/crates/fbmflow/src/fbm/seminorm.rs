use super::TimeGrid;

/// Discrete Holder seminorm `max_{v < u <= t} |f(u) - f(v)| / (u - v)^gamma`
/// over grid-point pairs. By convention the empty pair set (`t_index = 0`)
/// gives 0.
pub fn holder_seminorm(grid: &TimeGrid, values: &[f64], gamma: f64, t_index: usize) -> f64 {
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    assert!(t_index < values.len());
    let mut best = 0.0f64;
    for u in 1..=t_index {
        let tu = grid.point(u);
        for v in 0..u {
            let dt = tu - grid.point(v);
            let ratio = (values[u] - values[v]).abs() / dt.powf(gamma);
            if ratio > best {
                best = ratio;
            }
        }
    }
    best
}
