//! Classification metrics with class 1 (nontarget) as the positive class.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(truth: &[u8], pred: &[u8]) -> Self {
        assert_eq!(truth.len(), pred.len());
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    /// F1 of the positive class; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

pub fn f1_score(truth: &[u8], pred: &[u8]) -> f64 {
    Confusion::new(truth, pred).f1()
}

pub fn accuracy(truth: &[u8], pred: &[u8]) -> f64 {
    Confusion::new(truth, pred).accuracy()
}

/// Area under the precision-recall curve as average precision: the mean of
/// precision at each positive's rank. Tied scores are ranked as one block.
/// `None` if there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            block_tp += usize::from(positive[order[j]]);
            j += 1;
        }
        tp += block_tp;
        seen += j - i;
        ap += block_tp as f64 * tp as f64 / seen as f64;
        i = j;
    }
    Some(ap / n_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_by_hand() {
        let t = [1, 1, 0, 0, 1];
        let p = [1, 0, 1, 0, 1];
        // tp 2, fp 1, fn 1
        assert!((f1_score(&t, &p) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(accuracy(&t, &p), 0.6);
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let pos: Vec<bool> = (0..100).map(|i| i % 10 == 0).collect();
        let ap = average_precision(&[0.5; 100], &pos).unwrap();
        assert!((ap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_none() {
        assert!(average_precision(&[1.0], &[false]).is_none());
    }
}
