//! Observational analyses: PCA projections of embedding sets (iterative
//! eigensolver with deflation), cosine-similarity matrices averaged over
//! item types, layerwise sweeps, and SVG scatter rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_SEED: u64 = 0x9e3779b97f4a7c15;

// ─── embedding sets ────────────────────────────────────────────────────────

/// Where one embedding came from, for grouping and coloring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointLabel {
    /// List position / count class (1..9) — the scatter color class.
    pub list_position: usize,
    pub item_type: Option<usize>,
    pub layer: Option<usize>,
    pub role: Option<String>,
}

impl PointLabel {
    pub fn position(list_position: usize) -> Self {
        Self {
            list_position,
            item_type: None,
            layer: None,
            role: None,
        }
    }
}

/// A uniform-dimension collection of labeled vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<PointLabel>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, vector: Vec<f64>, label: PointLabel) -> Result<()> {
        if let Some(first) = self.vectors.first() {
            if vector.len() != first.len() {
                return Err(Error::Input(format!(
                    "embedding width {} differs from the set's {}",
                    vector.len(),
                    first.len()
                )));
            }
        }
        self.vectors.push(vector);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }
}

// ─── PCA ───────────────────────────────────────────────────────────────────

/// PCA output: per-point coordinates, variance ratios, and rank diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// `[n_points][k]` coordinates in component space.
    pub coords: Vec<Vec<f64>>,
    /// `[k][d]` principal directions, unit length, eigenvalue-ordered.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance captured per component.
    pub explained_variance: Vec<f64>,
    /// Components whose eigenvalue is numerically zero (data rank < k).
    pub reduced_rank: Option<String>,
}

/// Mean-centered PCA via power iteration with deflation. Components carry a
/// deterministic sign (largest-magnitude entry positive) and a seeded start
/// vector, so results are reproducible across runs and orderings.
pub fn pca_project(set: &EmbeddingSet, k: usize) -> Result<PcaProjection> {
    let n = set.len();
    let d = set.dim();
    if k == 0 || k > d {
        return Err(Error::Input(format!("component count {k} outside 1..={d}")));
    }
    if n < k + 1 {
        return Err(Error::Input(format!(
            "PCA with k={k} needs at least {} points, got {n}",
            k + 1
        )));
    }

    // Mean-center.
    let mut mean = vec![0.0; d];
    for v in &set.vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = set
        .vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // Population covariance C = XᵀX / n, dense d×d.
    let mut cov = vec![vec![0.0; d]; d];
    for v in &centered {
        for i in 0..d {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i][j] += v[i] * v[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= n as f64;
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut degenerate: Vec<usize> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    for comp in 0..k {
        let (lambda, mut v) = dominant_eigenpair(&cov, &components, &mut rng);
        if lambda <= total_variance * 1e-12 + f64::MIN_POSITIVE {
            degenerate.push(comp + 1);
        }
        fix_sign(&mut v);
        // Deflate: C ← C − λ v vᵀ.
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda.max(0.0));
        components.push(v);
    }

    let coords: Vec<Vec<f64>> = centered
        .iter()
        .map(|x| components.iter().map(|c| dot(x, c)).collect())
        .collect();
    let explained_variance: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| if total_variance > 0.0 { l / total_variance } else { 0.0 })
        .collect();
    Ok(PcaProjection {
        coords,
        components,
        explained_variance,
        reduced_rank: (!degenerate.is_empty()).then(|| {
            format!(
                "data rank below k: components {degenerate:?} have (numerically) zero variance"
            )
        }),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Largest eigenpair of `c` restricted to the complement of `previous`
/// (power iteration; orthogonalization guards against drift).
fn dominant_eigenpair(
    c: &[Vec<f64>],
    previous: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    let d = c.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    orthogonalize(&mut v, previous);
    let n = norm(&v);
    if n == 0.0 {
        // Pathological start; fall back to a deterministic basis sweep.
        v = orthonormal_completion(previous, d);
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }

    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut next: Vec<f64> = (0..d).map(|i| dot(&c[i], &v)).collect();
        orthogonalize(&mut next, previous);
        let n = norm(&next);
        if n < f64::MIN_POSITIVE * d as f64 {
            // The operator annihilates the remaining subspace: zero eigenvalue.
            return (0.0, orthonormal_completion(previous, d));
        }
        next.iter_mut().for_each(|x| *x /= n);
        // Align signs before measuring the step.
        if dot(&next, &v) < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        lambda = rayleigh(c, &v);
        if delta < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

fn rayleigh(c: &[Vec<f64>], v: &[f64]) -> f64 {
    let cv: Vec<f64> = (0..c.len()).map(|i| dot(&c[i], v)).collect();
    dot(v, &cv)
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

/// A deterministic unit vector orthogonal to `basis`.
fn orthonormal_completion(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        orthogonalize(&mut v, basis);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
    let mut v = vec![0.0; d];
    v[0] = 1.0;
    v
}

/// Deterministic sign: the largest-magnitude coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

// ─── cosine similarity ─────────────────────────────────────────────────────

/// Entry (i, j) = cos(a_i, b_j). A zero vector makes the entry undefined.
pub fn cosine_similarity_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for (i, va) in a.vectors.iter().enumerate() {
        let na = norm(va);
        if na == 0.0 {
            return Err(Error::UndefinedMetric(format!(
                "cosine undefined: row vector {i} is zero"
            )));
        }
        for (j, vb) in b.vectors.iter().enumerate() {
            let nb = norm(vb);
            if nb == 0.0 {
                return Err(Error::UndefinedMetric(format!(
                    "cosine undefined: column vector {j} is zero"
                )));
            }
            out[i][j] = dot(va, vb) / (na * nb);
        }
    }
    Ok(out)
}

/// Arithmetic mean of same-shape matrices (the "averaged over item types"
/// convention: one matrix per type pair, then the mean).
pub fn average_matrices(mats: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Input("no matrices to average".into()))?;
    let (r, c) = (first.len(), first.first().map(Vec::len).unwrap_or(0));
    let mut out = vec![vec![0.0; c]; r];
    for m in mats {
        if m.len() != r || m.first().map(Vec::len).unwrap_or(0) != c {
            return Err(Error::Input("matrix shapes differ".into()));
        }
        for (orow, mrow) in out.iter_mut().zip(m) {
            for (o, x) in orow.iter_mut().zip(mrow) {
                *o += x;
            }
        }
    }
    let k = mats.len() as f64;
    for row in out.iter_mut() {
        for x in row.iter_mut() {
            *x /= k;
        }
    }
    Ok(out)
}

/// Writes a labeled matrix as CSV (row label column + one column per label).
pub fn write_matrix_csv(
    path: &std::path::Path,
    row_labels: &[String],
    col_labels: &[String],
    matrix: &[Vec<f64>],
) -> Result<()> {
    use std::io::Write as _;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "label")?;
    for c in col_labels {
        write!(f, ",{c}")?;
    }
    writeln!(f)?;
    for (label, row) in row_labels.iter().zip(matrix) {
        write!(f, "{label}")?;
        for x in row {
            write!(f, ",{x:.6}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

// ─── layerwise sweeps ──────────────────────────────────────────────────────

/// Applies an analysis at every layer, returning (layer, artifact) pairs.
pub fn layerwise_sweep<T, A>(layers: impl IntoIterator<Item = usize>, analysis: A) -> Result<Vec<(usize, T)>>
where
    A: Fn(usize) -> Result<T>,
{
    layers
        .into_iter()
        .map(|l| analysis(l).map(|t| (l, t)))
        .collect()
}

// ─── SVG scatter ───────────────────────────────────────────────────────────

/// Count-class palette (classes 1..9), colorblind-tolerant ramp.
const PALETTE: [&str; 9] = [
    "#313695", "#4575b4", "#74add1", "#abd9e9", "#fee090", "#fdae61", "#f46d43", "#d73027",
    "#a50026",
];

/// Renders labeled 2D points as a standalone SVG scatter plot. `classes`
/// color points by count class 1..9; a legend maps the classes.
pub fn scatter_svg(points: &[(f64, f64)], classes: &[usize], title: &str) -> String {
    assert_eq!(points.len(), classes.len());
    let (w, h, margin) = (640.0, 480.0, 48.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() || x0 == x1 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if points.is_empty() || y0 == y1 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    svg.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        w - 2.0 * margin,
        h - 2.0 * margin
    ));
    for (&(x, y), &class) in points.iter().zip(classes) {
        let color = PALETTE[(class.clamp(1, 9)) - 1];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.85\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    for (i, color) in PALETTE.iter().enumerate() {
        let y = margin + 16.0 * i as f64;
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            w - margin + 14.0,
            w - margin + 24.0,
            y + 4.0,
            i + 1
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes a scatter SVG to disk.
pub fn write_scatter_svg(
    path: &std::path::Path,
    points: &[(f64, f64)],
    classes: &[usize],
    title: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, scatter_svg(points, classes, title))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(vectors: Vec<Vec<f64>>) -> EmbeddingSet {
        let mut s = EmbeddingSet::new();
        for (i, v) in vectors.into_iter().enumerate() {
            s.push(v, PointLabel::position(1 + i % 9)).unwrap();
        }
        s
    }

    /// Independent dense symmetric eigensolver: classical Jacobi sweeps.
    mod jacobi {
        pub fn eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
            let n = a.len();
            let mut v = vec![vec![0.0; n]; n];
            for (i, row) in v.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            for _sweep in 0..200 {
                let mut off = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        off += a[i][j] * a[i][j];
                    }
                }
                if off < 1e-26 {
                    break;
                }
                for p in 0..n {
                    for q in p + 1..n {
                        if a[p][q].abs() < 1e-300 {
                            continue;
                        }
                        let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        for k in 0..n {
                            let (akp, akq) = (a[k][p], a[k][q]);
                            a[k][p] = c * akp - s * akq;
                            a[k][q] = s * akp + c * akq;
                        }
                        for k in 0..n {
                            let (apk, aqk) = (a[p][k], a[q][k]);
                            a[p][k] = c * apk - s * aqk;
                            a[q][k] = s * apk + c * aqk;
                        }
                        for k in 0..n {
                            let (vkp, vkq) = (v[k][p], v[k][q]);
                            v[k][p] = c * vkp - s * vkq;
                            v[k][q] = s * vkp + c * vkq;
                        }
                    }
                }
            }
            let eigenvalues: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
            // Columns of v are the eigenvectors; transpose to rows.
            let vectors: Vec<Vec<f64>> =
                (0..n).map(|c| (0..n).map(|r| v[r][c]).collect()).collect();
            (eigenvalues, vectors)
        }
    }

    #[test]
    fn rank_one_data_loads_on_one_component() {
        // Points on a line through varied offsets.
        let dir = [3.0, -1.0, 2.0, 0.5];
        let vectors: Vec<Vec<f64>> = (0..8)
            .map(|i| dir.iter().map(|&d| d * i as f64).collect())
            .collect();
        let p = pca_project(&set_of(vectors), 2).unwrap();
        assert!((p.explained_variance[0] - 1.0).abs() < 1e-9);
        assert!(p.explained_variance[1].abs() < 1e-9);
        assert!(p.reduced_rank.is_some());
        let sum: f64 = p.explained_variance.iter().sum();
        assert!(sum <= 1.0 + 1e-9);
    }

    #[test]
    fn matches_dense_jacobi_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, d, k) = (10, 8, 3);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let set = set_of(vectors.clone());
        let p = pca_project(&set, k).unwrap();

        // Oracle: center, covariance, Jacobi, sort, project.
        let mut mean = vec![0.0; d];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n as f64;
            }
        }
        let centered: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        let mut cov = vec![vec![0.0; d]; d];
        for v in &centered {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += v[i] * v[j] / n as f64;
                }
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
        let (vals, vecs) = jacobi::eigen(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());

        for comp in 0..k {
            let oracle_val = vals[order[comp]];
            let oracle_vec = &vecs[order[comp]];
            assert!(
                (p.explained_variance[comp] - oracle_val / trace).abs() < 1e-8,
                "component {comp} variance"
            );
            // Compare coordinates up to a global sign.
            let ours: Vec<f64> = p.coords.iter().map(|c| c[comp]).collect();
            let theirs: Vec<f64> = centered.iter().map(|x| dot(x, oracle_vec)).collect();
            let flip = if dot(&ours, &theirs) < 0.0 { -1.0 } else { 1.0 };
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - flip * b).abs() < 1e-8, "coordinate mismatch");
            }
        }
    }

    #[test]
    fn pca_is_invariant_to_ordering_and_translation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vectors: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..6).map(|_| rng.random::<f64>()).collect())
            .collect();
        let p = pca_project(&set_of(vectors.clone()), 2).unwrap();

        // Reversed input order: same coordinates for the same points (up to
        // per-component sign).
        let rev: Vec<Vec<f64>> = vectors.iter().rev().cloned().collect();
        let pr = pca_project(&set_of(rev), 2).unwrap();
        for comp in 0..2 {
            let ours: Vec<f64> = p.coords.iter().map(|c| c[comp]).collect();
            let theirs: Vec<f64> = pr.coords.iter().rev().map(|c| c[comp]).collect();
            let flip = if ours
                .iter()
                .zip(&theirs)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                < 0.0
            {
                -1.0
            } else {
                1.0
            };
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - flip * b).abs() < 1e-8);
            }
        }

        // Adding a constant vector changes nothing (centering removes it).
        let shifted: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().enumerate().map(|(i, x)| x + 10.0 + i as f64).collect())
            .collect();
        let ps = pca_project(&set_of(shifted), 2).unwrap();
        for (a, b) in p.coords.iter().flatten().zip(ps.coords.iter().flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn pca_preconditions() {
        let s = set_of(vec![vec![1.0, 2.0], vec![2.0, 3.0]]);
        assert!(pca_project(&s, 2).is_err()); // needs k+1 = 3 points
        assert!(pca_project(&s, 3).is_err()); // k > d
        assert!(pca_project(&s, 0).is_err());

        let mut s = EmbeddingSet::new();
        s.push(vec![1.0, 2.0], PointLabel::position(1)).unwrap();
        assert!(s.push(vec![1.0], PointLabel::position(2)).is_err());
    }

    #[test]
    fn cosine_matrix_cases() {
        let a = set_of(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let m = cosine_similarity_matrix(&a, &a).unwrap();
        assert!((m[0][0] - 1.0).abs() < 1e-15);
        assert!((m[1][1] - 1.0).abs() < 1e-15);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][0], m[0][1]); // self-matrix symmetry

        let b = set_of(vec![vec![-1.0, 0.0]]);
        let m = cosine_similarity_matrix(&a, &b).unwrap();
        assert!((m[0][0] + 1.0).abs() < 1e-15);

        let z = set_of(vec![vec![0.0, 0.0]]);
        assert!(matches!(
            cosine_similarity_matrix(&a, &z),
            Err(Error::UndefinedMetric(_))
        ));

        // Entries bounded in [−1, 1] on random data.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let x = set_of(
            (0..5)
                .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect(),
        );
        for row in cosine_similarity_matrix(&x, &x).unwrap() {
            for v in row {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn matrix_averaging_is_entrywise() {
        let m1 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m2 = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let avg = average_matrices(&[m1, m2]).unwrap();
        assert_eq!(avg, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(average_matrices(&[]).is_err());
        assert!(
            average_matrices(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err()
        );
    }

    #[test]
    fn layerwise_sweep_labels_and_purity() {
        let f = |l: usize| Ok(l * l);
        let a = layerwise_sweep(0..8, f).unwrap();
        let b = layerwise_sweep(0..8, f).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        for (i, (layer, val)) in a.iter().enumerate() {
            assert_eq!(*layer, i);
            assert_eq!(*val, i * i);
        }
    }

    #[test]
    fn scatter_svg_is_well_formed() {
        let points = vec![(0.0, 0.0), (1.0, 2.0), (-1.0, 0.5)];
        let classes = vec![1, 5, 9];
        let svg = scatter_svg(&points, &classes, "title & <layer 3>");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 3 + 9); // points + legend
        assert!(svg.contains("title &amp; &lt;layer 3&gt;"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.svg");
        write_scatter_svg(&path, &points, &classes, "t").unwrap();
        assert!(path.exists());
    }

    #[test]
    fn matrix_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_matrix_csv(
            &path,
            &["r1".into(), "r2".into()],
            &["c1".into(), "c2".into()],
            &[vec![1.0, 0.25], vec![-0.5, 0.0]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "label,c1,c2\nr1,1.000000,0.250000\nr2,-0.500000,0.000000\n");
    }
}
