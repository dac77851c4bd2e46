//! Diffusion gradient tables and Q-space direction subsampling.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Unit-norm tolerance enforced on stored directions.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Largest norm deviation that is silently renormalized when parsing.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

/// One volume of a diffusion acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEntry {
    /// Diffusion weighting, s/mm².
    pub bval: f64,
    /// Unit gradient direction, or zero for b0 volumes.
    pub bvec: [f64; 3],
}

impl GradientEntry {
    pub fn is_b0(&self) -> bool {
        self.bval == 0.0
    }
}

/// Ordered b-value / direction table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    entries: Vec<GradientEntry>,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl GradientScheme {
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !e.bval.is_finite() || e.bval < 0.0 {
                return Err(Error::InvalidScheme(format!("entry {i}: bad b-value {}", e.bval)));
            }
            if e.is_b0() {
                if e.bvec != [0.0; 3] {
                    return Err(Error::InvalidScheme(format!("entry {i}: b0 entry must have a zero direction")));
                }
            } else {
                let n = norm(e.bvec);
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::InvalidScheme(format!("entry {i}: direction norm {n} is not unit")));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Parses FSL `bvecs` (3 rows × N) and `bvals` (1 row × N) text.
    pub fn parse_fsl(bvec_text: &str, bval_text: &str) -> Result<Self> {
        let rows = parse_rows(bvec_text)?;
        if rows.len() != 3 {
            return Err(Error::Parse(format!("bvecs must have 3 rows, found {}", rows.len())));
        }
        let bval_rows = parse_rows(bval_text)?;
        if bval_rows.len() != 1 {
            return Err(Error::Parse(format!("bvals must have 1 row, found {}", bval_rows.len())));
        }
        let bvals = &bval_rows[0];
        let n = bvals.len();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Parse(format!("bvecs row {r} has {} columns but bvals has {n}", row.len())));
            }
        }

        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let bval = bvals[i];
            let mut bvec = [rows[0][i], rows[1][i], rows[2][i]];
            if bval == 0.0 {
                bvec = [0.0; 3];
            } else {
                let nrm = norm(bvec);
                if (nrm - 1.0).abs() > RENORMALIZE_TOLERANCE {
                    return Err(Error::InvalidScheme(format!(
                        "column {i}: direction norm {nrm} deviates from 1 by more than {RENORMALIZE_TOLERANCE}"
                    )));
                }
                // Vectors already unit to rounding are kept as written so
                // that text round trips are bit-exact.
                if (nrm - 1.0).abs() > 4.0 * f64::EPSILON {
                    bvec = [bvec[0] / nrm, bvec[1] / nrm, bvec[2] / nrm];
                }
            }
            entries.push(GradientEntry { bval, bvec });
        }
        Self::new(entries)
    }

    /// Renders the table back to FSL text, returning `(bvecs, bvals)`.
    pub fn to_fsl(&self) -> (String, String) {
        let mut bvecs = String::new();
        for axis in 0..3 {
            let row: Vec<String> = self.entries.iter().map(|e| fmt_num(e.bvec[axis])).collect();
            let _ = writeln!(bvecs, "{}", row.join(" "));
        }
        let row: Vec<String> = self.entries.iter().map(|e| fmt_num(e.bval)).collect();
        (bvecs, format!("{}\n", row.join(" ")))
    }

    pub fn entries(&self) -> &[GradientEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].is_b0()).collect()
    }

    pub fn dwi_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.entries[i].is_b0()).collect()
    }

    /// Keeps every b0 entry plus the listed diffusion-weighted entries, in
    /// original order.
    pub fn subset(&self, dwi_indices: &[usize]) -> Result<GradientScheme> {
        Ok(GradientScheme { entries: self.subset_indices(dwi_indices)?.iter().map(|&i| self.entries[i]).collect() })
    }

    /// Positions retained by [`GradientScheme::subset`].
    pub fn subset_indices(&self, dwi_indices: &[usize]) -> Result<Vec<usize>> {
        let mut keep = vec![false; self.len()];
        for &i in dwi_indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range")));
            }
            keep[i] = true;
        }
        Ok((0..self.len()).filter(|&i| keep[i] || self.entries[i].is_b0()).collect())
    }

    /// Applies a 3×3 rotation to every direction.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> GradientScheme {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let g = e.bvec;
                let mut out = [0.0; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[i][0] * g[0] + r[i][1] * g[1] + r[i][2] * g[2];
                }
                GradientEntry { bval: e.bval, bvec: out }
            })
            .collect();
        GradientScheme { entries }
    }

    /// One b0 followed by `n` near-uniform directions on the hemisphere,
    /// obtained by antipodally symmetric charge repulsion from a spiral start.
    pub fn electrostatic(n: usize, bval: f64) -> GradientScheme {
        let dirs = electrostatic_directions(n);
        let mut entries = vec![GradientEntry { bval: 0.0, bvec: [0.0; 3] }];
        entries.extend(dirs.into_iter().map(|bvec| GradientEntry { bval, bvec }));
        GradientScheme { entries }
    }

    /// One b0 plus the six classical (±1,±1,0)/√2-type directions.
    pub fn canonical_six(bval: f64) -> GradientScheme {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let dirs = [[s, s, 0.0], [s, -s, 0.0], [s, 0.0, s], [s, 0.0, -s], [0.0, s, s], [0.0, s, -s]];
        let mut entries = vec![GradientEntry { bval: 0.0, bvec: [0.0; 3] }];
        entries.extend(dirs.iter().map(|&bvec| GradientEntry { bval, bvec }));
        GradientScheme { entries }
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:?}")
    }
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| Error::Parse(format!("non-numeric token {tok:?}"))))
                .collect()
        })
        .collect()
}

fn electrostatic_directions(n: usize) -> Vec<[f64; 3]> {
    if n == 0 {
        return Vec::new();
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();

    let mut step = 0.05;
    for _ in 0..300 {
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let d = [pts[i][0] - sign * pts[j][0], pts[i][1] - sign * pts[j][1], pts[i][2] - sign * pts[j][2]];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for k in 0..3 {
                        forces[i][k] += d[k] * inv;
                    }
                }
            }
        }
        let mut fmax: f64 = 0.0;
        for (p, f) in pts.iter().zip(forces.iter_mut()) {
            let radial = p[0] * f[0] + p[1] * f[1] + p[2] * f[2];
            for k in 0..3 {
                f[k] -= radial * p[k];
            }
            fmax = fmax.max(norm(*f));
        }
        if fmax == 0.0 {
            break;
        }
        for (p, f) in pts.iter_mut().zip(&forces) {
            let q = [p[0] + step * f[0] / fmax, p[1] + step * f[1] / fmax, p[2] + step * f[2] / fmax];
            let m = norm(q);
            *p = [q[0] / m, q[1] / m, q[2] / m];
        }
        step *= 0.99;
    }

    for p in &mut pts {
        if p[2] < 0.0 {
            *p = [-p[0], -p[1], -p[2]];
        }
    }
    pts
}

/// Angle between two axes, treating `g` and `-g` as the same direction.
/// Result lies in `[0, π/2]`.
pub fn angular_distance(g1: [f64; 3], g2: [f64; 3]) -> Result<f64> {
    for g in [g1, g2] {
        let n = norm(g);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NonUnitVector { norm: n });
        }
    }
    Ok(axis_angle(g1, g2))
}

// atan2 of |cross| and |dot| keeps small angles accurate and gives exactly
// zero for identical or opposite vectors, where acos(|dot|) would not.
fn axis_angle(g1: [f64; 3], g2: [f64; 3]) -> f64 {
    let dot = g1[0] * g2[0] + g1[1] * g2[1] + g1[2] * g2[2];
    let cross = [g1[1] * g2[2] - g1[2] * g2[1], g1[2] * g2[0] - g1[0] * g2[2], g1[0] * g2[1] - g1[1] * g2[0]];
    norm(cross).atan2(dot.abs())
}

/// Directions chosen by [`kennard_stone_select`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSelection {
    /// Positions into the source scheme, in selection order.
    pub indices: Vec<usize>,
    /// Minimum pairwise angular distance among the selected directions, radians.
    pub spread: f64,
}

impl SubsetSelection {
    /// Index file: a `#` header recording the spread, then one 0-based index per line.
    pub fn to_index_file(&self) -> String {
        let mut out = format!("# spread={:?}\n", self.spread);
        for i in &self.indices {
            let _ = writeln!(out, "{i}");
        }
        out
    }

    pub fn parse_index_file(text: &str) -> Result<SubsetSelection> {
        let mut spread = f64::NAN;
        let mut indices = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix('#') {
                if let Some(v) = header.trim().strip_prefix("spread=") {
                    spread = v.parse().map_err(|_| Error::Parse(format!("bad spread value {v:?}")))?;
                }
                continue;
            }
            indices.push(line.parse().map_err(|_| Error::Parse(format!("bad index {line:?}")))?);
        }
        Ok(SubsetSelection { indices, spread })
    }
}

/// Minimum pairwise angular distance over a set of directions.
pub fn spread_of(scheme: &GradientScheme, indices: &[usize]) -> f64 {
    let e = scheme.entries();
    let mut best = f64::INFINITY;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            best = best.min(axis_angle(e[i].bvec, e[j].bvec));
        }
    }
    best
}

/// Greedy max-min (Kennard-Stone) selection of `k` diffusion-weighted
/// directions under the antipodal angular metric.
///
/// Seeds with the farthest pair (lexicographically smallest index pair on
/// ties), then repeatedly adds the candidate whose nearest selected
/// direction is farthest away, lowest index first on ties.
pub fn kennard_stone_select(scheme: &GradientScheme, k: usize) -> Result<SubsetSelection> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let candidates = scheme.dwi_indices();
    if k > candidates.len() {
        return Err(Error::NotEnoughDirections { requested: k, available: candidates.len() });
    }
    let e = scheme.entries();
    let m = candidates.len();
    let dist = |a: usize, b: usize| axis_angle(e[candidates[a]].bvec, e[candidates[b]].bvec);

    let mut seed = (0, 1);
    let mut seed_d = f64::NEG_INFINITY;
    for a in 0..m {
        for b in a + 1..m {
            let d = dist(a, b);
            if d > seed_d {
                seed_d = d;
                seed = (a, b);
            }
        }
    }

    let mut chosen = vec![seed.0, seed.1];
    let mut taken = vec![false; m];
    taken[seed.0] = true;
    taken[seed.1] = true;
    let mut nearest: Vec<f64> = (0..m).map(|c| dist(c, seed.0).min(dist(c, seed.1))).collect();

    while chosen.len() < k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for c in 0..m {
            if !taken[c] && nearest[c] > best_d {
                best_d = nearest[c];
                best = Some(c);
            }
        }
        let pick = best.expect("k is bounded by the candidate count");
        taken[pick] = true;
        chosen.push(pick);
        for c in 0..m {
            if !taken[c] {
                nearest[c] = nearest[c].min(dist(c, pick));
            }
        }
    }

    let indices: Vec<usize> = chosen.into_iter().map(|c| candidates[c]).collect();
    let spread = spread_of(scheme, &indices);
    Ok(SubsetSelection { indices, spread })
}
