//! Pieces used only by the baseline variants: input noise, MC-dropout
//! uncertainty and the selection score.

use rand::Rng as _;

use super::{NoiseConfig, SelectConfig};
use crate::error::{KestError, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Scalar;
use crate::tokenizer::{TokenId, TokenSequence, MASK};

/// Token drop, local shuffle, then masking, in that order.
///
/// The shuffle adds `U(0, shuffle_k)` to each position and stably sorts, so
/// with `shuffle_k < 2` no token moves more than one slot.
pub fn noise_corrupt(tokens: &TokenSequence, noise: &NoiseConfig, rng: &mut Rng) -> TokenSequence {
    let content = tokens.content();
    let mut kept: Vec<TokenId> = content.iter().copied().filter(|_| !rng.random_bool(noise.drop_rate)).collect();
    if kept.is_empty() && !content.is_empty() {
        kept.push(content[rng.random_range(0..content.len())]);
    }
    if noise.shuffle_k > 0.0 {
        let mut keyed: Vec<(f64, TokenId)> =
            kept.iter().enumerate().map(|(i, &t)| (i as f64 + rng.random_range(0.0..noise.shuffle_k), t)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        kept = keyed.into_iter().map(|(_, t)| t).collect();
    }
    for t in kept.iter_mut() {
        if rng.random_bool(noise.mask_rate) {
            *t = MASK;
        }
    }
    TokenSequence::from_content(&kept, tokens.l_max())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mutual information between the prediction and the dropout noise:
/// entropy of the mean minus mean entropy over `t` stochastic passes.
pub fn bald_from_passes(passes: &[Vec<f64>]) -> f64 {
    let t = passes.len() as f64;
    let k = passes[0].len();
    let mean: Vec<f64> = (0..k).map(|c| passes.iter().map(|p| p[c]).sum::<f64>() / t).collect();
    entropy(&mean) - passes.iter().map(|p| entropy(p)).sum::<f64>() / t
}

pub fn bald_uncertainty<T: Scalar>(model: &Model<T>, tokens: &TokenSequence, t: usize, rng: &mut Rng) -> Result<f64> {
    if t < 2 {
        return Err(KestError::config(format!("BALD needs at least 2 passes, got {t}")));
    }
    let passes = (0..t).map(|_| model.forward_cls_with(tokens, Some(rng))).collect::<Result<Vec<_>>>()?;
    Ok(bald_from_passes(&passes))
}

/// `conf + ε / uncertainty` with the default `ε = 1e-5`.
pub fn selection_score(conf: f64, uncertainty: f64) -> f64 {
    selection_score_with(conf, uncertainty, SelectConfig::default().epsilon)
}

pub fn selection_score_with(conf: f64, uncertainty: f64, epsilon: f64) -> f64 {
    conf + epsilon / uncertainty.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use crate::rng::Rng;

    fn seq(content: &[TokenId]) -> TokenSequence {
        TokenSequence::from_content(content, 16)
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = seq(&[5, 6, 7, 8, 9]);
        let quiet = NoiseConfig { drop_rate: 0.0, mask_rate: 0.0, shuffle_k: 0.0 };
        let mut r = Rng::seed_from_u64(1);
        assert_eq!(noise_corrupt(&s, &quiet, &mut r), s);
    }

    #[test]
    fn dropping_everything_keeps_one_token() {
        let s = seq(&[5, 6, 7, 8, 9]);
        let drop = NoiseConfig { drop_rate: 0.999_999_999, mask_rate: 0.0, shuffle_k: 0.0 };
        let mut r = Rng::seed_from_u64(2);
        for _ in 0..200 {
            let out = noise_corrupt(&s, &drop, &mut r);
            assert_eq!(out.content().len(), 1);
            assert!(s.content().contains(&out.content()[0]));
        }
    }

    #[test]
    fn shuffle_moves_tokens_at_most_one_slot() {
        let content: Vec<TokenId> = (5..17).collect();
        let s = seq(&content[..12]);
        let shuffle = NoiseConfig { drop_rate: 0.0, mask_rate: 0.0, shuffle_k: 1.1 };
        let mut r = Rng::seed_from_u64(3);
        let mut moved = 0;
        for _ in 0..10_000 {
            let out = noise_corrupt(&s, &shuffle, &mut r);
            for (new_pos, t) in out.content().iter().enumerate() {
                let old_pos = (*t - 5) as usize;
                assert!(old_pos.abs_diff(new_pos) <= 1);
                moved += usize::from(old_pos != new_pos);
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn bald_cases() {
        assert!((bald_from_passes(&[vec![1.0, 0.0], vec![0.0, 1.0]]) - 2f64.ln()).abs() < 1e-12);
        assert!(bald_from_passes(&[vec![0.3, 0.7], vec![0.3, 0.7]]).abs() < 1e-12);

        let cfg = ModelConfig { vocab_size: 20, l_max: 16, d_model: 8, n_heads: 2, d_ff: 16, d_label: 4, cls_hidden: 8, n_layers: 1, num_classes: 2, dropout_rate: 0.0 };
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let mut r = Rng::seed_from_u64(4);
        let u = bald_uncertainty(&model, &seq(&[5, 6, 7]), 4, &mut r).unwrap();
        assert!(u.abs() < 1e-9);
        assert!(matches!(bald_uncertainty(&model, &seq(&[5]), 1, &mut r), Err(KestError::Config(_))));

        let noisy = Model::<f64>::new(ModelConfig { dropout_rate: 0.3, ..cfg }, 3).unwrap();
        for i in 0..20 {
            let u = bald_uncertainty(&noisy, &seq(&[5, 6, 7 + i % 5]), 8, &mut r).unwrap();
            assert!(u >= -1e-9);
        }
    }

    #[test]
    fn selection_score_cases() {
        assert!((selection_score(0.9, 1e-5) - 1.9).abs() < 1e-12);
        assert!((selection_score(0.4, 1e12) - 0.4).abs() < 1e-12);
        assert!(selection_score(0.5, 0.0).is_finite());
    }

    proptest! {
        #[test]
        fn selection_score_is_monotone_in_confidence(a in 0.0f64..1.0, b in 0.0f64..1.0, u in 1e-9f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(selection_score(lo, u) <= selection_score(hi, u));
        }

        #[test]
        fn bald_is_non_negative(raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 2..6)) {
            let passes: Vec<Vec<f64>> = raw.into_iter().map(|v| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect() }).collect();
            prop_assert!(bald_from_passes(&passes) >= -1e-9);
        }
    }
}
