//! Vote vectors, the per-site ledger and the two tallying rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FmKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteVector {
    pub site: usize,
    pub kind: FmKind,
    pub batch: usize,
    pub bits: Vec<bool>,
}

/// Per group, the index of the highest score (lowest index on ties).
fn group_argmax(scores: &[f64], labels: &[usize], groups: usize) -> Result<Vec<bool>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("group_argmax", &[labels.len()], &[scores.len()]));
    }
    let mut best: Vec<Option<usize>> = vec![None; groups];
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if l >= groups {
            return Err(Error::contract(format!("head {i} has label {l} outside {groups} groups")));
        }
        match best[l] {
            Some(b) if scores[b] >= s => {}
            _ => best[l] = Some(i),
        }
    }
    let mut bits = vec![false; labels.len()];
    for (g, b) in best.into_iter().enumerate() {
        let b = b.ok_or_else(|| Error::contract(format!("group {g} has no heads")))?;
        bits[b] = true;
    }
    Ok(bits)
}

/// One vote vector per feature-map kind: in every group the head with the
/// highest pattern score gets the bit.
pub fn batch_votes(
    eta: &[(FmKind, Vec<f64>)],
    labels: &[usize],
    groups: usize,
    site: usize,
    batch: usize,
) -> Result<Vec<VoteVector>> {
    eta.iter()
        .map(|(kind, scores)| Ok(VoteVector { site, kind: *kind, batch, bits: group_argmax(scores, labels, groups)? }))
        .collect()
}

/// Votes and summed pattern scores of one site over the voting epoch,
/// under an assignment frozen at epoch start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLedger {
    pub site: usize,
    pub labels: Vec<usize>,
    pub groups: usize,
    pub votes: Vec<VoteVector>,
    pub eta_sums: Vec<f64>,
}

impl SiteLedger {
    pub fn new(site: usize, labels: Vec<usize>, groups: usize) -> Self {
        let k = labels.len();
        Self { site, labels, groups, votes: Vec::new(), eta_sums: vec![0.0; k] }
    }

    /// Appends this batch's votes and accumulates its scores.
    pub fn record(&mut self, batch: usize, eta: &[(FmKind, Vec<f64>)]) -> Result<()> {
        let votes = batch_votes(eta, &self.labels, self.groups, self.site, batch)?;
        for (_, scores) in eta {
            self.eta_sums.iter_mut().zip(scores).for_each(|(a, s)| *a += s);
        }
        self.votes.extend(votes);
        Ok(())
    }

    /// Number of 1-votes each head collected.
    pub fn counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.labels.len()];
        for v in &self.votes {
            for (n, &b) in c.iter_mut().zip(&v.bits) {
                *n += b as u64;
            }
        }
        c
    }
}

/// 0-1 tally: per group, the head with the most votes stays. `expected`
/// is the number of vote vectors a complete epoch produces.
pub fn vote(ledger: &SiteLedger, expected: usize) -> Result<Vec<bool>> {
    if ledger.votes.len() != expected || expected == 0 {
        return Err(Error::contract(format!(
            "ledger for site {} holds {} votes, expected {expected}",
            ledger.site,
            ledger.votes.len()
        )));
    }
    let counts: Vec<f64> = ledger.counts().into_iter().map(|c| c as f64).collect();
    group_argmax(&counts, &ledger.labels, ledger.groups)
}

/// Score-sum tally: per group, the head with the largest summed pattern
/// score stays.
pub fn score_sum_vote(ledger: &SiteLedger, expected: usize) -> Result<Vec<bool>> {
    if ledger.votes.len() != expected || expected == 0 {
        return Err(Error::contract(format!(
            "ledger for site {} holds {} votes, expected {expected}",
            ledger.site,
            ledger.votes.len()
        )));
    }
    group_argmax(&ledger.eta_sums, &ledger.labels, ledger.groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_per_group() {
        let v = batch_votes(&[(FmKind::Value, vec![0.9, 0.1, 0.2, 0.8])], &[0, 0, 1, 1], 2, 0, 0).unwrap();
        assert_eq!(v[0].bits, vec![true, false, false, true]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let v = batch_votes(&[(FmKind::Value, vec![0.5; 4])], &[1, 0, 1, 0], 2, 0, 0).unwrap();
        assert_eq!(v[0].bits, vec![true, true, false, false]);
    }

    #[test]
    fn singleton_groups_all_stay() {
        let v = batch_votes(&[(FmKind::Output, vec![0.1, 0.7, 0.3])], &[2, 0, 1], 3, 0, 0).unwrap();
        assert_eq!(v[0].bits, vec![true; 3]);
    }

    #[test]
    fn missing_group_is_contract_error() {
        assert!(matches!(batch_votes(&[(FmKind::Value, vec![0.1, 0.2])], &[0, 0], 2, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn tally_picks_most_votes() {
        let mut l = SiteLedger::new(0, vec![0, 0], 1);
        for b in 0..5 {
            l.record(b, &[(FmKind::Value, vec![1.0, 0.0])]).unwrap();
        }
        l.record(5, &[(FmKind::Value, vec![0.0, 1.0])]).unwrap();
        assert_eq!(l.counts(), vec![5, 1]);
        assert_eq!(vote(&l, 6).unwrap(), vec![true, false]);
        assert!(vote(&l, 9).is_err());
    }

    #[test]
    fn tied_counts_keep_lowest() {
        let mut l = SiteLedger::new(0, vec![0, 0], 1);
        l.record(0, &[(FmKind::Value, vec![1.0, 0.0]), (FmKind::Attention, vec![0.0, 1.0])]).unwrap();
        assert_eq!(vote(&l, 2).unwrap(), vec![true, false]);
    }

    #[test]
    fn single_vote_is_the_mask() {
        let mut l = SiteLedger::new(0, vec![0, 1, 0, 1], 2);
        l.record(0, &[(FmKind::Value, vec![0.1, 0.2, 0.3, 0.05])]).unwrap();
        assert_eq!(vote(&l, 1).unwrap(), l.votes[0].bits);
    }

    #[test]
    fn score_sum_can_disagree_with_zero_one() {
        // head 0 wins narrowly twice, head 1 wins hugely once
        let mut l = SiteLedger::new(0, vec![0, 0], 1);
        l.record(0, &[(FmKind::Value, vec![0.51, 0.50])]).unwrap();
        l.record(1, &[(FmKind::Value, vec![0.51, 0.50])]).unwrap();
        l.record(2, &[(FmKind::Value, vec![-0.9, 0.9])]).unwrap();
        assert_eq!(vote(&l, 3).unwrap(), vec![true, false]);
        assert_eq!(score_sum_vote(&l, 3).unwrap(), vec![false, true]);
    }

    #[test]
    fn constant_scores_agree() {
        let mut l = SiteLedger::new(0, vec![0, 1, 0, 1], 2);
        for b in 0..4 {
            l.record(b, &[(FmKind::Value, vec![0.2, 0.9, 0.4, 0.1])]).unwrap();
        }
        assert_eq!(vote(&l, 4).unwrap(), score_sum_vote(&l, 4).unwrap());
    }
}
