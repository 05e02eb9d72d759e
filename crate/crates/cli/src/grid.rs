//! Flag grammar for numeric grids.

use anyhow::{bail, Context, Result};
use safer_core::conformal::uniform_grid;

/// `start:stop:step` (both ends included) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            bail!("expected start:stop:step, got {text:?}");
        }
        let v = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number {p:?} in {text:?}")))
            .collect::<Result<Vec<_>>>()?;
        return Ok(uniform_grid(v[0], v[1], v[2])?);
    }
    let v = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number {p:?} in {text:?}")))
        .collect::<Result<Vec<_>>>()?;
    if v.iter().any(|x| !x.is_finite()) {
        bail!("grid values must be finite: {text:?}");
    }
    Ok(v)
}

/// Window lengths: `start:stop` (inclusive), `start:stop:step`, or a comma list.
pub fn parse_windows(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    let num = |p: &str| p.trim().parse::<usize>().with_context(|| format!("bad window {p:?} in {text:?}"));
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let (start, stop, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, s] => (num(a)?, num(b)?, num(s)?),
            _ => bail!("expected start:stop[:step], got {text:?}"),
        };
        if step == 0 || start > stop {
            bail!("empty window range {text:?}");
        }
        return Ok((start..=stop).step_by(step).collect());
    }
    text.split(',').map(num).collect()
}
