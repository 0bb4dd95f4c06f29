//! Combination of reward and cost ascent directions.
//!
//! Aligned gradients (positive inner product) are averaged. Conflicting
//! gradients are each projected onto the orthogonal complement of the other
//! before averaging, so the combined step never decreases either objective to
//! first order.

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Aligned,
    Conflicting,
}

/// Result of [`combine`], with the quantities the convergence weights need.
#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub direction: Vec<f64>,
    pub relation: Relation,
    pub inner: f64,
    pub reward_norm_sq: f64,
    pub cost_norm_sq: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Angle between the two gradients in degrees. Zero vectors count as aligned (0°).
pub fn angle(g_r: &[f64], g_c: &[f64]) -> Result<f64> {
    check_dim("gradient pair", g_r.len(), g_c.len())?;
    let nr = norm_sq(g_r).sqrt();
    let nc = norm_sq(g_c).sqrt();
    if nr == 0.0 || nc == 0.0 {
        return Ok(0.0);
    }
    let cos = (dot(g_r, g_c) / (nr * nc)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// `g - (<g, along> / |along|^2) along`; identity when `along` is zero.
pub fn project_out(g: &[f64], along: &[f64]) -> Vec<f64> {
    let n = norm_sq(along);
    if n == 0.0 {
        return g.to_vec();
    }
    let k = dot(g, along) / n;
    g.iter().zip(along).map(|(x, y)| x - k * y).collect()
}

pub fn classify(g_r: &[f64], g_c: &[f64]) -> Relation {
    if norm_sq(g_r) == 0.0 || norm_sq(g_c) == 0.0 || dot(g_r, g_c) > 0.0 {
        Relation::Aligned
    } else {
        Relation::Conflicting
    }
}

/// `(g_r + g_c)/2` when aligned, `(g_r⁺ + g_c⁺)/2` when the angle is at least 90°.
pub fn combine(g_r: &[f64], g_c: &[f64]) -> Result<Combined> {
    check_dim("gradient pair", g_r.len(), g_c.len())?;
    let inner = dot(g_r, g_c);
    let relation = classify(g_r, g_c);
    let direction = match relation {
        Relation::Aligned => g_r.iter().zip(g_c).map(|(a, b)| 0.5 * (a + b)).collect(),
        Relation::Conflicting => {
            let r_plus = project_out(g_r, g_c);
            let c_plus = project_out(g_c, g_r);
            r_plus
                .iter()
                .zip(&c_plus)
                .map(|(a, b)| 0.5 * (a + b))
                .collect()
        }
    };
    Ok(Combined {
        direction,
        relation,
        inner,
        reward_norm_sq: norm_sq(g_r),
        cost_norm_sq: norm_sq(g_c),
    })
}
