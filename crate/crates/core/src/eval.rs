//! Desk-scale quality metrics for generated corpora.

use serde::{Deserialize, Serialize};

use crate::categorical::TokenId;
use crate::denoiser::DataModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unigram_tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bigram_tv: Option<f64>,
}

fn check_rows(rows: &[Vec<TokenId>]) -> Result<usize> {
    let n = rows.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("no rows to evaluate".into()))?;
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format("rows have different lengths".into()));
    }
    Ok(n)
}

/// Token accuracy and exact match of `generated` against aligned `reference` rows.
pub fn paired_metrics(generated: &[Vec<TokenId>], reference: &[Vec<TokenId>]) -> Result<Metrics> {
    let n = check_rows(generated)?;
    if generated.len() != reference.len() {
        return Err(Error::Format(format!(
            "{} generated rows for {} reference rows",
            generated.len(),
            reference.len()
        )));
    }
    let mut correct = 0usize;
    let mut exact = 0usize;
    for (g, r) in generated.iter().zip(reference) {
        if r.len() != n {
            return Err(Error::Format(format!("row length {} differs from {n}", r.len())));
        }
        let hits = g.iter().zip(r).filter(|(a, b)| a == b).count();
        correct += hits;
        exact += usize::from(hits == n);
    }
    Ok(Metrics {
        rows: generated.len(),
        token_accuracy: Some(correct as f64 / (n * generated.len()) as f64),
        exact_match: Some(exact as f64 / generated.len() as f64),
        ..Default::default()
    })
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

/// Pooled unigram and adjacent-bigram total variation to a data model.
pub fn model_metrics(generated: &[Vec<TokenId>], model: &DataModel) -> Result<Metrics> {
    let n = check_rows(generated)?;
    let k = model.vocab_size();
    if let Some(len) = model.seq_len() {
        if len != n {
            return Err(Error::Format(format!("model has {len} positions, rows have {n}")));
        }
    }
    let marginals = model.position_marginals(n);
    let mut uni_model = vec![0.0; k];
    for m in &marginals {
        for (u, p) in uni_model.iter_mut().zip(m) {
            *u += p / n as f64;
        }
    }
    let mut uni = vec![0.0; k];
    let total = (n * generated.len()) as f64;
    for row in generated {
        for &x in row {
            if x >= k {
                return Err(Error::TokenOutOfRange { id: x, k });
            }
            uni[x] += 1.0 / total;
        }
    }
    let mut metrics = Metrics {
        rows: generated.len(),
        unigram_tv: Some(tv(&uni, &uni_model)),
        ..Default::default()
    };
    if n >= 2 {
        let pairs = (n - 1) as f64;
        let mut bi_model = vec![0.0; k * k];
        for pos in 0..n - 1 {
            for a in 0..k {
                for b in 0..k {
                    let joint = match model {
                        DataModel::Factorized { marginals } => marginals[pos][a] * marginals[pos + 1][b],
                        DataModel::Markov { transition, .. } => marginals[pos][a] * transition[a][b],
                    };
                    bi_model[a * k + b] += joint / pairs;
                }
            }
        }
        let mut bi = vec![0.0; k * k];
        let count = pairs * generated.len() as f64;
        for row in generated {
            for w in row.windows(2) {
                bi[w[0] * k + w[1]] += 1.0 / count;
            }
        }
        metrics.bigram_tv = Some(tv(&bi, &bi_model));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_files_score_one() {
        let rows = vec![vec![1, 2, 3], vec![3, 2, 1]];
        let m = paired_metrics(&rows, &rows).unwrap();
        assert_eq!(m.token_accuracy, Some(1.0));
        assert_eq!(m.exact_match, Some(1.0));
    }

    #[test]
    fn uniform_guess_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen: Vec<Vec<TokenId>> = (0..12_500).map(|_| (0..8).map(|_| rng.gen_range(0..16)).collect()).collect();
        let refr: Vec<Vec<TokenId>> = (0..12_500).map(|_| (0..8).map(|_| rng.gen_range(0..16)).collect()).collect();
        let acc = paired_metrics(&gen, &refr).unwrap().token_accuracy.unwrap();
        assert!((acc - 1.0 / 16.0).abs() < 0.01);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(paired_metrics(&[vec![1, 2]], &[vec![1, 2], vec![1, 2]]).is_err());
        assert!(paired_metrics(&[vec![1, 2]], &[vec![1]]).is_err());
    }

    #[test]
    fn model_samples_have_small_tv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for model in [
            DataModel::random_factorized(5, 4, &mut rng).unwrap(),
            DataModel::random_markov(5, &mut rng).unwrap(),
        ] {
            let rows: Vec<Vec<TokenId>> = (0..20_000).map(|_| model.sample(4, &mut rng)).collect();
            let m = model_metrics(&rows, &model).unwrap();
            assert!(m.unigram_tv.unwrap() < 0.02);
            assert!(m.bigram_tv.unwrap() < 0.03);
        }
    }
}
