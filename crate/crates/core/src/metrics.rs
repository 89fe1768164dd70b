//! Causal-effect metrics over patched runs: causal-influence score,
//! indirect effect, logit difference, KL divergence, probability drop,
//! and mean ± sd aggregation.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Causal-influence score of a patch:
/// ½[(P(r̃|C*) − P(r̃|C′)) + (P(r′|C′) − P(r′|C*))].
/// Positive values mean the patch moved mass toward the hypothesis digit r̃
/// and away from the target's own answer r′.
pub fn ci_score(
    p_tilde_star: f64,
    p_tilde_prime: f64,
    p_rp_prime: f64,
    p_rp_star: f64,
) -> Result<f64> {
    check_prob("P(r̃|C*)", p_tilde_star)?;
    check_prob("P(r̃|C′)", p_tilde_prime)?;
    check_prob("P(r′|C′)", p_rp_prime)?;
    check_prob("P(r′|C*)", p_rp_star)?;
    Ok(0.5 * ((p_tilde_star - p_tilde_prime) + (p_rp_prime - p_rp_star)))
}

/// Relative indirect effect:
/// ½[(P(r|C*) − P(r|C′))/P(r|C′) + (P(r′|C′) − P(r′|C*))/P(r′|C*)].
pub fn indirect_effect(
    p_r_star: f64,
    p_r_prime: f64,
    p_rp_prime: f64,
    p_rp_star: f64,
) -> Result<f64> {
    check_prob("P(r|C*)", p_r_star)?;
    check_prob("P(r|C′)", p_r_prime)?;
    check_prob("P(r′|C′)", p_rp_prime)?;
    check_prob("P(r′|C*)", p_rp_star)?;
    if p_r_prime == 0.0 || p_rp_star == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "indirect effect undefined: P(r|C′) = {p_r_prime}, P(r′|C*) = {p_rp_star}"
        )));
    }
    Ok(0.5 * ((p_r_star - p_r_prime) / p_r_prime + (p_rp_prime - p_rp_star) / p_rp_star))
}

/// Difference of raw (pre-softmax) logits: M[r|C*] − M[r′|C*].
pub fn logit_difference(logit_r: f64, logit_rp: f64) -> f64 {
    logit_r - logit_rp
}

/// D_KL(p ‖ q) = Σ p ln(p/q), with 0·ln(0/q) = 0 and +∞ where q = 0 < p.
/// Both inputs must be normalized within 1e-6.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input("distributions differ in length".into()));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        if dist.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Input(format!("{name} has a negative or non-finite entry")));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("{name} sums to {sum}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// How much ground-truth probability the intervention removed.
pub fn probability_drop(p_before: f64, p_after: f64) -> f64 {
    p_before - p_after
}

/// Mean ± standard deviation over metric evaluations. Undefined-metric
/// entries are excluded and counted; any other error propagates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation (divide by n).
    pub sd: f64,
    pub n: usize,
    pub n_excluded: usize,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2} (n={})", self.mean, self.sd, self.n)
    }
}

pub fn aggregate<I: IntoIterator<Item = Result<f64>>>(values: I) -> Result<Aggregate> {
    let mut kept = Vec::new();
    let mut n_excluded = 0;
    for v in values {
        match v {
            Ok(x) => kept.push(x),
            Err(Error::UndefinedMetric(_)) => n_excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "nothing to aggregate ({n_excluded} undefined entries excluded)"
        )));
    }
    // Welford's online mean/variance.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in kept.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(Aggregate {
        mean,
        sd: (m2 / kept.len() as f64).sqrt(),
        n: kept.len(),
        n_excluded,
    })
}

/// One metric evaluation, with the probabilities it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// NaN encodes an undefined evaluation in CSV output.
    pub value: f64,
    pub p_tilde_star: f64,
    pub p_tilde_prime: f64,
    pub p_rp_prime: f64,
    pub p_rp_star: f64,
    pub sample_id: String,
}

/// Writes metric rows as CSV with a fixed column order.
pub fn write_metric_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "metric,value,p_tilde_star,p_tilde_prime,p_rp_prime,p_rp_star,sample_id"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.metric, r.value, r.p_tilde_star, r.p_tilde_prime, r.p_rp_prime, r.p_rp_star,
            r.sample_id
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ci_score_formula() {
        assert_eq!(ci_score(1.0, 0.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(ci_score(0.3, 0.3, 0.9, 0.9).unwrap(), 0.0);
        assert!((ci_score(0.8, 0.2, 0.7, 0.1).unwrap() - 0.6).abs() < 1e-15);
        assert!(ci_score(1.2, 0.0, 0.0, 0.0).is_err());
        assert!(ci_score(0.5, -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn ci_score_is_antisymmetric_under_role_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (a, b, c, d) = (
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            );
            let fwd = ci_score(a, b, c, d).unwrap();
            let rev = ci_score(b, a, d, c).unwrap();
            assert!((fwd + rev).abs() < 1e-15);
            assert!((-1.0..=1.0).contains(&fwd));
        }
    }

    #[test]
    fn indirect_effect_formula() {
        assert!((indirect_effect(0.4, 0.2, 0.6, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(indirect_effect(0.5, 0.5, 0.25, 0.25).unwrap(), 0.0);
        assert!((indirect_effect(0.7, 0.7, 0.5, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            indirect_effect(0.4, 0.0, 0.6, 0.3),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            indirect_effect(0.4, 0.2, 0.6, 0.0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn logit_difference_properties() {
        assert_eq!(logit_difference(2.0, 0.5), 1.5);
        assert_eq!(logit_difference(3.0, 3.0), 0.0);
        // Shift invariance.
        assert_eq!(
            logit_difference(2.0 + 17.3, 0.5 + 17.3),
            logit_difference(2.0, 0.5)
        );
    }

    #[test]
    fn logit_difference_equals_log_probability_ratio() {
        let logits = [1.2, -0.3, 0.7, 2.5, -1.1];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|x| (x - m).exp() / z).collect();
        for r in 0..logits.len() {
            for rp in 0..logits.len() {
                let ld = logit_difference(logits[r], logits[rp]);
                assert!((ld - (p[r] / p[rp]).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kl_divergence_cases() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            f64::INFINITY
        );
        // 0·ln(0/q) = 0 even when q = 0 at the same index.
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            kl_divergence(&[0.6, 0.6], &[0.5, 0.5]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[0.5]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 1e-3).collect();
            let mut q: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 1e-3).collect();
            let (zp, zq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
            p.iter_mut().for_each(|x| *x /= zp);
            q.iter_mut().for_each(|x| *x /= zq);
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn probability_drop_cases() {
        assert_eq!(probability_drop(0.9, 0.9), 0.0);
        assert_eq!(probability_drop(1.0, 0.0), 1.0);
        assert!((probability_drop(0.7, 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        assert_eq!(
            aggregate([Ok(0.7)]).unwrap(),
            Aggregate {
                mean: 0.7,
                sd: 0.0,
                n: 1,
                n_excluded: 0
            }
        );
        let a = aggregate([Ok(0.0), Ok(1.0)]).unwrap();
        assert_eq!(a.mean, 0.5);
        assert_eq!(a.sd, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let a = aggregate(xs.iter().map(|&x| Ok(x))).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((a.sd - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_excludes_undefined_and_reports_counts() {
        let a = aggregate([
            Ok(1.0),
            Err(Error::UndefinedMetric("x".into())),
            Ok(3.0),
            Err(Error::UndefinedMetric("y".into())),
        ])
        .unwrap();
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.n, 2);
        assert_eq!(a.n_excluded, 2);

        assert!(matches!(
            aggregate([Err(Error::UndefinedMetric("x".into()))]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            aggregate([Ok(1.0), Err(Error::Input("bad".into()))]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn metric_csv_layout() {
        let rows = vec![MetricReport {
            metric: "ci".into(),
            value: 0.6,
            p_tilde_star: 0.8,
            p_tilde_prime: 0.2,
            p_rp_prime: 0.7,
            p_rp_star: 0.1,
            sample_id: "abc123".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metric_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "metric,value,p_tilde_star,p_tilde_prime,p_rp_prime,p_rp_star,sample_id\nci,0.6,0.8,0.2,0.7,0.1,abc123\n"
        );
    }
}
