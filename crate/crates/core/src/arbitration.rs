//! Weighted voting between the FS heads and the backbone verdict.

use serde::{Deserialize, Serialize};

use crate::backbone::{verdict_from_logits, Backbone, Prompt};
use crate::error::{Error, Result};
use crate::fs_blocks::FsHeads;
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub k: usize,
    /// Per-head weights `omega_k`.
    pub weights: Vec<f64>,
    pub vlm_weight: f64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            k: 3,
            weights: vec![1.0; 3],
            vlm_weight: 2.0,
        }
    }
}

impl VoteConfig {
    /// Equal head weights and a double-weight backbone vote.
    pub fn uniform(k: usize) -> Self {
        VoteConfig {
            k,
            weights: vec![1.0; k],
            vlm_weight: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.k {
            return Err(Error::Config(format!("{} head weights for K={}", self.weights.len(), self.k)));
        }
        if self.weights.iter().chain([&self.vlm_weight]).any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("vote weights must be positive and finite".into()));
        }
        Ok(())
    }

    /// `0.5 * (sum omega_k + omega_vlm)`.
    pub fn threshold(&self) -> f64 {
        0.5 * (self.weights.iter().sum::<f64>() + self.vlm_weight)
    }
}

/// `y_k = 1` iff `p > 0.5`; an exact 0.5 resolves to failure.
pub fn binarize(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numerical(format!("probability {p} outside [0, 1]")));
    }
    Ok(u8::from(p > 0.5))
}

/// Weighted tally `sum omega_k y_k + omega_vlm y_vlm`.
pub fn tally(y_vlm: u8, votes: &[u8], cfg: &VoteConfig) -> Result<f64> {
    if votes.len() != cfg.weights.len() || votes.len() != cfg.k {
        return Err(Error::Config(format!(
            "{} head votes for {} weights (K={})",
            votes.len(),
            cfg.weights.len(),
            cfg.k
        )));
    }
    if y_vlm > 1 || votes.iter().any(|&v| v > 1) {
        return Err(Error::Config("votes must be 0 or 1".into()));
    }
    let heads: f64 = votes.iter().zip(&cfg.weights).map(|(&y, w)| w * y as f64).sum();
    Ok(heads + cfg.vlm_weight * y_vlm as f64)
}

/// Final verdict: strict `tally > threshold`.
pub fn vote(y_vlm: u8, votes: &[u8], cfg: &VoteConfig) -> Result<u8> {
    Ok(u8::from(tally(y_vlm, votes, cfg)? > cfg.threshold()))
}

/// One row of the per-example prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub y_vlm: u8,
    pub p: Vec<f64>,
    pub y: Vec<u8>,
    pub tally: f64,
    pub threshold: f64,
    pub y_hat: u8,
    pub label: u8,
}

impl Prediction {
    pub fn assemble(id: &str, y_vlm: u8, probs: &[f64], label: u8, cfg: &VoteConfig) -> Result<Self> {
        let y = probs.iter().map(|&p| binarize(p)).collect::<Result<Vec<_>>>()?;
        let t = tally(y_vlm, &y, cfg)?;
        Ok(Prediction {
            id: id.to_string(),
            y_vlm,
            p: probs.to_vec(),
            y_hat: u8::from(t > cfg.threshold()),
            y,
            tally: t,
            threshold: cfg.threshold(),
            label,
        })
    }

    /// JSON object with `p_1..p_K` and `y_1..y_K` flattened.
    pub fn to_json_line(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("id".into(), self.id.clone().into());
        m.insert("y_vlm".into(), self.y_vlm.into());
        for (k, p) in self.p.iter().enumerate() {
            m.insert(format!("p_{}", k + 1), (*p).into());
        }
        for (k, y) in self.y.iter().enumerate() {
            m.insert(format!("y_{}", k + 1), (*y).into());
        }
        m.insert("tally".into(), self.tally.into());
        m.insert("threshold".into(), self.threshold.into());
        m.insert("y_hat".into(), self.y_hat.into());
        m.insert("label".into(), self.label.into());
        serde_json::Value::Object(m).to_string()
    }
}

/// Backbone verdict and head probabilities of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub y_vlm: u8,
    pub probs: Vec<f64>,
}

/// Checks that every head reads an existing layer of the expected width.
pub fn check_compatible<T: Real>(model: &Backbone<T>, heads: &FsHeads<T>) -> Result<()> {
    for (&layer, head) in heads.layers.iter().zip(&heads.heads) {
        if layer == 0 || layer > model.n_layers() {
            return Err(Error::Config(format!(
                "head reads layer {layer}, backbone has {} layers",
                model.n_layers()
            )));
        }
        if head.config.d_model != model.config.d_model {
            return Err(Error::Config(format!(
                "head width {} does not match d_model {}",
                head.config.d_model, model.config.d_model
            )));
        }
    }
    Ok(())
}

/// One packed backbone pass per batch: the verdict logits and the hidden
/// states read by the heads come from the same run.
pub fn score_batch<T: Real>(model: &Backbone<T>, heads: &FsHeads<T>, prompts: &[&Prompt<T>]) -> Result<Vec<Scores>> {
    check_compatible(model, heads)?;
    let run = model.run_batch(prompts)?;
    let mut out: Vec<Scores> = model
        .verdict_logits(&run)
        .into_iter()
        .map(|(s, f)| Scores {
            y_vlm: verdict_from_logits(s, f),
            probs: Vec::with_capacity(heads.len()),
        })
        .collect();
    for (&layer, head) in heads.layers.iter().zip(&heads.heads) {
        for (o, p) in out.iter_mut().zip(head.predict(&run.lm.hidden[layer], &run.seqs)?) {
            o.probs.push(p.to_f64());
        }
    }
    Ok(out)
}

/// Every `(y_vlm, y_1..y_K)` combination with its tally and verdict, in
/// binary counting order with `y_vlm` as the most significant bit.
pub fn truth_table(cfg: &VoteConfig) -> Result<Vec<(u8, Vec<u8>, f64, u8)>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(1 << (cfg.k + 1));
    for bits in 0u32..(1 << (cfg.k + 1)) {
        let y_vlm = ((bits >> cfg.k) & 1) as u8;
        let votes: Vec<u8> = (0..cfg.k).map(|i| ((bits >> (cfg.k - 1 - i)) & 1) as u8).collect();
        let t = tally(y_vlm, &votes, cfg)?;
        rows.push((y_vlm, votes, t, u8::from(t > cfg.threshold())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn binarize_ties_to_failure() {
        assert_eq!(binarize(0.7).unwrap(), 1);
        assert_eq!(binarize(0.5).unwrap(), 0);
        assert_eq!(binarize(0.4999).unwrap(), 0);
        assert!(binarize(1.2).is_err());
        assert!(binarize(f64::NAN).is_err());
    }

    #[test]
    fn worked_examples() {
        let c = VoteConfig::default();
        assert_eq!(vote(0, &[0, 0, 0], &c).unwrap(), 0);
        assert_eq!(tally(1, &[1, 0, 0], &c).unwrap(), 3.0);
        assert_eq!(vote(1, &[1, 0, 0], &c).unwrap(), 1);
        assert_eq!(vote(0, &[1, 1, 0], &c).unwrap(), 0);
        assert_eq!(vote(0, &[1, 1, 1], &c).unwrap(), 1);
        assert_eq!(tally(1, &[1, 1, 1], &c).unwrap(), 5.0);
        assert!(vote(1, &[1, 0], &c).is_err());
    }

    #[test]
    fn single_head_defers_to_backbone() {
        let c = VoteConfig::uniform(1);
        for y_vlm in 0..2 {
            for y1 in 0..2 {
                assert_eq!(vote(y_vlm, &[y1], &c).unwrap(), y_vlm);
            }
        }
    }

    #[test]
    fn default_truth_table() {
        let rows = truth_table(&VoteConfig::default()).unwrap();
        assert_eq!(rows.len(), 16);
        for (y_vlm, votes, _, y_hat) in rows {
            let s: u8 = votes.iter().sum();
            let closed = (y_vlm == 1 && s >= 1) || s == 3;
            assert_eq!(y_hat == 1, closed);
        }
    }

    #[test]
    fn prediction_line_layout() {
        let p = Prediction::assemble("ep00001/pos", 1, &[0.9, 0.2, 0.5], 1, &VoteConfig::default()).unwrap();
        assert_eq!(p.y, vec![1, 0, 0]);
        assert_eq!(p.y_hat, 1);
        let v: serde_json::Value = serde_json::from_str(&p.to_json_line()).unwrap();
        assert_eq!(v["p_3"], 0.5);
        assert_eq!(v["y_1"], 1);
        assert_eq!(v["threshold"], 2.5);
    }

    fn weights_and_votes() -> impl Strategy<Value = (Vec<f64>, f64, Vec<u8>, u8)> {
        (1usize..6).prop_flat_map(|k| {
            (
                prop::collection::vec(0.01f64..10.0, k),
                0.01f64..10.0,
                prop::collection::vec(0u8..2, k),
                0u8..2,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn scaling_weights_keeps_verdict((w, wv, votes, y_vlm) in weights_and_votes(), c in 0.01f64..100.0) {
            let a = VoteConfig { k: w.len(), weights: w.clone(), vlm_weight: wv };
            let b = VoteConfig { k: w.len(), weights: w.iter().map(|x| x * c).collect(), vlm_weight: wv * c };
            prop_assert_eq!(vote(y_vlm, &votes, &a).unwrap(), vote(y_vlm, &votes, &b).unwrap());
        }

        #[test]
        fn raising_a_vote_never_lowers_verdict((w, wv, votes, y_vlm) in weights_and_votes(), pick in 0usize..6) {
            let c = VoteConfig { k: w.len(), weights: w, vlm_weight: wv };
            let base = vote(y_vlm, &votes, &c).unwrap();
            let (mut v2, mut yv2) = (votes.clone(), y_vlm);
            if pick < votes.len() { v2[pick] = 1 } else { yv2 = 1 }
            prop_assert!(vote(yv2, &v2, &c).unwrap() >= base);
        }

        #[test]
        fn unanimity((w, wv, votes, _y) in weights_and_votes()) {
            let c = VoteConfig { k: w.len(), weights: w, vlm_weight: wv };
            prop_assert_eq!(vote(1, &vec![1; votes.len()], &c).unwrap(), 1);
            prop_assert_eq!(vote(0, &vec![0; votes.len()], &c).unwrap(), 0);
        }
    }
}
