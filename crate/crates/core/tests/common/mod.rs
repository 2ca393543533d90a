#![allow(dead_code)]

use std::path::PathBuf;

use predcal::design::{parse_formula, ModelSpec};
use predcal::input::{read_binomial_file, read_counts_file, read_mixed_file};
use predcal::{ClusteredBinomial, ClusteredCounts, MixedModelData};

pub const C2_FORMULA: &str = "y_ijk~(1|a)+(1|b)+(1|a:b)";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn binomial(name: &str) -> ClusteredBinomial {
    ClusteredBinomial::from_pairs(&read_binomial_file(&fixture(name)).unwrap()).unwrap()
}

pub fn counts(name: &str) -> ClusteredCounts {
    ClusteredCounts::new(read_counts_file(&fixture(name)).unwrap().1).unwrap()
}

pub fn c2_spec() -> ModelSpec {
    parse_formula(C2_FORMULA).unwrap()
}

pub fn mixed(name: &str, spec: &ModelSpec) -> MixedModelData {
    read_mixed_file(&fixture(name), spec.response()).unwrap()
}

/// Variance components of the balanced crossed two-way layout `y ~ a*b`
/// (all effects random) from the ANOVA expected mean squares, in the order
/// `[a, b, a:b, residual]`.
pub fn anova_two_way(y: &[f64], a: &[usize], b: &[usize], levels_a: usize, levels_b: usize) -> [f64; 4] {
    let n = y.len() as f64;
    let k = n / (levels_a * levels_b) as f64;
    let grand = y.iter().sum::<f64>() / n;
    let mut mean_a = vec![0.0; levels_a];
    let mut mean_b = vec![0.0; levels_b];
    let mut mean_ab = vec![vec![0.0; levels_b]; levels_a];
    for i in 0..y.len() {
        mean_a[a[i]] += y[i];
        mean_b[b[i]] += y[i];
        mean_ab[a[i]][b[i]] += y[i];
    }
    mean_a.iter_mut().for_each(|m| *m /= n / levels_a as f64);
    mean_b.iter_mut().for_each(|m| *m /= n / levels_b as f64);
    mean_ab.iter_mut().flatten().for_each(|m| *m /= k);

    let ss_a: f64 = mean_a.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * levels_b as f64 * k;
    let ss_b: f64 = mean_b.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * levels_a as f64 * k;
    let mut ss_ab = 0.0;
    for i in 0..levels_a {
        for j in 0..levels_b {
            ss_ab += (mean_ab[i][j] - mean_a[i] - mean_b[j] + grand).powi(2);
        }
    }
    ss_ab *= k;
    let ss_e: f64 = (0..y.len()).map(|i| (y[i] - mean_ab[a[i]][b[i]]).powi(2)).sum();

    let (ia, jb) = (levels_a as f64, levels_b as f64);
    let ms_a = ss_a / (ia - 1.0);
    let ms_b = ss_b / (jb - 1.0);
    let ms_ab = ss_ab / ((ia - 1.0) * (jb - 1.0));
    let ms_e = ss_e / (n - ia * jb);
    [
        (ms_a - ms_ab) / (jb * k),
        (ms_b - ms_ab) / (ia * k),
        (ms_ab - ms_e) / k,
        ms_e,
    ]
}

/// 0-based level codes of a factor column, in order of first appearance.
pub fn codes(labels: &[String]) -> (Vec<usize>, usize) {
    let mut seen: Vec<&String> = Vec::new();
    let codes = labels
        .iter()
        .map(|l| match seen.iter().position(|s| *s == l) {
            Some(p) => p,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        })
        .collect();
    (codes, seen.len())
}
