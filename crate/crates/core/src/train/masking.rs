use rand::seq::index::sample;
use rand::Rng;

use crate::data::{TextFeatures, MASK, NUM_RESERVED};

pub const MASK_RATIO: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Positions selected for the MLM loss of one sequence, with the action
/// applied to each and the original token as target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub targets: Vec<usize>,
}

/// `ceil(ratio · n)` with a guard against `0.15 · 20 = 3.0000000000000004`.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    let raw = ratio * len as f64;
    let n = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    n.clamp(1, len.max(1))
}

/// Selects `ceil(ratio · len)` real positions without replacement and applies
/// `[MASK]` / random token / keep with probabilities 0.8 / 0.1 / 0.1.
pub fn apply_masking(
    text: &TextFeatures,
    vocab_size: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> (TextFeatures, MaskingPlan) {
    let mut out = text.clone();
    if text.len == 0 {
        let plan = MaskingPlan {
            positions: Vec::new(),
            actions: Vec::new(),
            targets: Vec::new(),
        };
        return (out, plan);
    }
    let n = masked_count(text.len, ratio);
    let mut positions = sample(rng, text.len, n).into_vec();
    positions.sort_unstable();
    let mut actions = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for &p in &positions {
        targets.push(text.ids[p]);
        let u: f64 = rng.gen();
        let action = if u < 0.8 {
            out.ids[p] = MASK;
            MaskAction::Mask
        } else if u < 0.9 {
            out.ids[p] = rng.gen_range(NUM_RESERVED..vocab_size.max(NUM_RESERVED + 1));
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    (
        out,
        MaskingPlan {
            positions,
            actions,
            targets,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn text(len: usize, z: usize) -> TextFeatures {
        TextFeatures {
            ids: (0..z).map(|i| if i < len { 10 + i } else { 0 }).collect(),
            mask: (0..z).map(|i| i < len).collect(),
            len,
        }
    }

    #[test]
    fn ceiling_rule() {
        assert_eq!(masked_count(1, 0.15), 1);
        assert_eq!(masked_count(20, 0.15), 3);
        assert_eq!(masked_count(21, 0.15), 4);
        assert_eq!(masked_count(100, 0.15), 15);
        let mut rng = stream(0, "test/mask");
        let (_, plan) = apply_masking(&text(1, 4), 50, MASK_RATIO, &mut rng);
        assert_eq!(plan.positions, vec![0]);
    }

    #[test]
    fn statistics_over_many_tokens() {
        let mut rng = stream(0, "test/mask-stats");
        let (mut tokens, mut selected) = (0usize, 0usize);
        let mut counts = [0usize; 3];
        // Full-length sequences: the ceiling adds up to one token per
        // sequence, which inflates the fraction for short ones.
        while tokens < 100_000 {
            let t = text(64, 64);
            let (x, plan) = apply_masking(&t, 500, MASK_RATIO, &mut rng);
            tokens += t.len;
            selected += plan.positions.len();
            for ((&p, &a), &target) in plan.positions.iter().zip(&plan.actions).zip(&plan.targets) {
                assert!(p < t.len);
                assert_eq!(target, t.ids[p]);
                match a {
                    MaskAction::Mask => {
                        assert_eq!(x.ids[p], MASK);
                        counts[0] += 1;
                    }
                    MaskAction::Random => {
                        assert!(x.ids[p] >= NUM_RESERVED && x.ids[p] < 500);
                        counts[1] += 1;
                    }
                    MaskAction::Keep => {
                        assert_eq!(x.ids[p], t.ids[p]);
                        counts[2] += 1;
                    }
                }
            }
            for p in 0..t.z() {
                if !plan.positions.contains(&p) {
                    assert_eq!(x.ids[p], t.ids[p]);
                }
            }
        }
        let frac = selected as f64 / tokens as f64;
        assert!((frac - 0.15).abs() <= 0.01, "{frac}");
        for (c, want) in counts.iter().zip([0.8, 0.1, 0.1]) {
            let share = *c as f64 / selected as f64;
            assert!((share - want).abs() <= 0.02, "{share} vs {want}");
        }
    }
}
