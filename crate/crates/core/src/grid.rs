//! Uniform time grid on `[-K, T + K]`.
//!
//! All paths in this crate live on one shared grid: the working window is
//! `[0, T]`, history data occupies `[-K, 0]`, and backward terminal data
//! extends to `(T, T + K]`. Nodes are addressed by signed index `i`, with
//! `t_i = i * dt`; index 0 is time zero. The delay `K` must be an exact
//! multiple of the step, so every delay atom lands on a node and discrete
//! summation-by-parts identities hold exactly rather than up to quadrature
//! error.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    delay: f64,
    n_steps: usize,
    k_steps: usize,
    dt: f64,
}

/// Relative slack used when checking that `delay / dt` is an integer.
const ALIGN_TOL: f64 = 1e-9;

pub fn build_grid(t_final: f64, delay: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(Error::validation(format!(
            "grid: t_final must be positive and finite, got {t_final}"
        )));
    }
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(Error::validation(format!(
            "grid: delay must be nonnegative and finite, got {delay}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::validation("grid: n_steps must be at least 1"));
    }
    let dt = t_final / n_steps as f64;
    let ratio = delay / dt;
    let k_steps = ratio.round();
    if (ratio - k_steps).abs() > ALIGN_TOL * ratio.max(1.0) {
        // Suggest the closest horizon split that makes the delay land on a node.
        let hint = suggest_n_steps(t_final, delay, n_steps);
        return Err(Error::validation(format!(
            "grid: delay {delay} is not an integer multiple of dt {dt} \
             (delay/dt = {ratio}); nearest admissible n_steps: {hint}"
        )));
    }
    Ok(TimeGrid {
        t_final,
        delay,
        n_steps,
        k_steps: k_steps as usize,
        dt,
    })
}

fn suggest_n_steps(t_final: f64, delay: f64, requested: usize) -> usize {
    // Smallest n >= requested with delay * n / t_final integral (within slack).
    for n in requested..(requested + 10_000) {
        let r = delay * n as f64 / t_final;
        if (r - r.round()).abs() <= ALIGN_TOL * r.max(1.0) {
            return n;
        }
    }
    requested
}

impl TimeGrid {
    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    /// Steps across `[0, T]`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Steps across the delay window `[-K, 0]`.
    pub fn k_steps(&self) -> usize {
        self.k_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node_time(&self, node: i64) -> f64 {
        node as f64 * self.dt
    }

    /// First node of the full grid (time `-K`).
    pub fn first_node(&self) -> i64 {
        -(self.k_steps as i64)
    }

    /// Node at time `T`.
    pub fn last_main_node(&self) -> i64 {
        self.n_steps as i64
    }

    /// Last node of the full grid (time `T + K`).
    pub fn last_node(&self) -> i64 {
        (self.n_steps + self.k_steps) as i64
    }

    /// Nearest node for an offset in seconds, ties resolved toward time zero.
    pub fn snap_node(&self, t: f64) -> i64 {
        let raw = t / self.dt;
        let down = raw.floor();
        let frac = raw - down;
        if (frac - 0.5).abs() < 1e-12 {
            // Exactly between two nodes: pick the one closer to zero.
            let a = down as i64;
            let b = a + 1;
            if (self.node_time(a)).abs() <= (self.node_time(b)).abs() {
                a
            } else {
                b
            }
        } else {
            raw.round() as i64
        }
    }

    /// Exact node for a time that must already be grid-aligned.
    pub fn node_at(&self, t: f64, what: &str) -> Result<i64> {
        let raw = t / self.dt;
        let node = raw.round();
        if (raw - node).abs() > ALIGN_TOL * raw.abs().max(1.0) {
            return Err(Error::validation(format!(
                "{what}: time {t} does not lie on the grid (dt = {})",
                self.dt
            )));
        }
        Ok(node as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_node_unit_grid() {
        let g = build_grid(1.0, 0.0, 4).unwrap();
        let times: Vec<f64> = (0..=4).map(|i| g.node_time(i)).collect();
        assert_eq!(times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.k_steps(), 0);
        assert_eq!(g.first_node(), 0);
        assert_eq!(g.last_node(), 4);
    }

    #[test]
    fn misaligned_delay_rejected_with_hint() {
        let err = build_grid(1.0, 0.3, 4).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("not an integer multiple"), "{msg}");
        assert!(msg.contains("10"), "hint should mention n_steps=10: {msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn delay_window_indexing() {
        let g = build_grid(2.0, 0.5, 8).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.k_steps(), 2);
        assert_eq!(g.first_node(), -2);
        assert_eq!(g.last_main_node(), 8);
        assert_eq!(g.last_node(), 10);
        assert_eq!(g.node_time(-2), -0.5);
        assert_eq!(g.node_time(10), 2.5);
    }

    #[test]
    fn snapping_ties_go_toward_zero() {
        let g = build_grid(1.0, 0.25, 8).unwrap();
        // dt = 0.125. Offset -0.1875 sits exactly between nodes -2 and -1.
        assert_eq!(g.snap_node(-0.1875), -1);
        assert_eq!(g.snap_node(0.1875), 1);
        assert_eq!(g.snap_node(-0.26), -2);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(build_grid(1.0, 0.0, 0).is_err());
    }
}
