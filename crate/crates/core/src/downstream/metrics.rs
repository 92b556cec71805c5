/// Area under the ROC curve as the probability that a random positive
/// outranks a random negative, ties counting one half. `None` unless both
/// classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from mid-ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score
/// thresholds taken from high to low. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let new_tp = order[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += new_tp;
        seen += j - i + 1;
        ap += (new_tp as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        i = j + 1;
    }
    Some(ap)
}

/// One-vs-rest scores and labels of one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    /// Unweighted mean over classes where the metric is defined.
    Macro,
    /// Metric over all classes pooled into one decision list.
    Micro,
}

pub fn micro_flatten(classes: &[ClassScores]) -> ClassScores {
    ClassScores {
        scores: classes
            .iter()
            .flat_map(|c| c.scores.iter().copied())
            .collect(),
        labels: classes
            .iter()
            .flat_map(|c| c.labels.iter().copied())
            .collect(),
    }
}

pub fn aggregate(
    classes: &[ClassScores],
    mode: Aggregate,
    metric: fn(&[f64], &[bool]) -> Option<f64>,
) -> Option<f64> {
    match mode {
        Aggregate::Macro => {
            let defined: Vec<f64> = classes
                .iter()
                .filter_map(|c| metric(&c.scores, &c.labels))
                .collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        }
        Aggregate::Micro => {
            let flat = micro_flatten(classes);
            metric(&flat.scores, &flat.labels)
        }
    }
}
