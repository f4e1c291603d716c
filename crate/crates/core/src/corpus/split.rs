use serde::{Deserialize, Serialize};

/// One user's time-ordered item indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: usize,
    pub item_ids: Vec<usize>,
}

/// Next-item supervision: the `[SEQ]` of `inputs[j]` predicts `targets[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub user_id: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainExample {
    /// Inputs followed by the final target: the item chain the example covers.
    pub fn chain(&self) -> Vec<usize> {
        let mut c = self.inputs.clone();
        if let Some(&last) = self.targets.last() {
            c.push(last);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user_id: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<TrainExample>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    /// Sequences shorter than three items, left out of every part.
    pub excluded: usize,
}

/// Last item tests, second-to-last validates; items `1..n−2` are training
/// anchors, each supervised by its successor.
pub fn leave_one_out_split(sequences: &[InteractionSequence]) -> Split {
    let mut split = Split::default();
    for s in sequences {
        let n = s.item_ids.len();
        if n < 3 {
            split.excluded += 1;
            continue;
        }
        let items = &s.item_ids;
        split.test.push(EvalCase {
            user_id: s.user_id,
            context: items[..n - 1].to_vec(),
            target: items[n - 1],
        });
        split.valid.push(EvalCase {
            user_id: s.user_id,
            context: items[..n - 2].to_vec(),
            target: items[n - 2],
        });
        split.train.push(TrainExample {
            user_id: s.user_id,
            inputs: items[..n - 2].to_vec(),
            targets: items[1..n - 1].to_vec(),
        });
    }
    if split.excluded > 0 {
        log::warn!(
            "leave-one-out split excluded {} sequences shorter than 3 items",
            split.excluded
        );
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[usize]) -> InteractionSequence {
        InteractionSequence {
            user_id: 0,
            item_ids: items.to_vec(),
        }
    }

    #[test]
    fn four_items() {
        let s = leave_one_out_split(&[seq(&[0, 1, 2, 3])]);
        assert_eq!(s.test[0].context, vec![0, 1, 2]);
        assert_eq!(s.test[0].target, 3);
        assert_eq!(s.valid[0].context, vec![0, 1]);
        assert_eq!(s.valid[0].target, 2);
        assert_eq!(s.train[0].inputs, vec![0, 1]);
        assert_eq!(s.train[0].targets, vec![1, 2]);
        assert_eq!(s.train[0].chain(), vec![0, 1, 2]);
    }

    #[test]
    fn three_items_single_pair() {
        let s = leave_one_out_split(&[seq(&[7, 8, 9])]);
        let pairs: Vec<_> = s.train[0].inputs.iter().zip(&s.train[0].targets).collect();
        assert_eq!(pairs, vec![(&7, &8)]);
    }

    #[test]
    fn short_sequences_excluded() {
        let s = leave_one_out_split(&[seq(&[1, 2]), seq(&[3, 4])]);
        assert!(s.train.is_empty());
        assert_eq!(s.excluded, 2);
    }

    #[test]
    fn targets_never_in_context() {
        let s = leave_one_out_split(&[seq(&[0, 1, 2, 3, 4])]);
        // the target position is outside the context window
        assert_eq!(s.test[0].context.len(), 4);
        assert_eq!(s.valid[0].context.len(), 3);
    }
}
