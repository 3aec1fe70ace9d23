//! Outcome tables, perturbation-binned transfer statistics and per-member
//! classification grids.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft, perturbation, AdversarialExample, AttackConfig};
use crate::defense::{noisy_query, perturb_input, Classifier, Ensemble, Label, QueryPolicy};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::rng;
use crate::tensor::Tensor;

/// How an attack input was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackOrigin {
    Single { member: usize },
    Superimposed { members: Vec<usize> },
}

/// An adversarial input ready for evaluation, whatever crafted it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackItem {
    pub source_index: usize,
    pub true_label: usize,
    pub target: usize,
    pub perturbation: f64,
    pub origin: AttackOrigin,
    pub original: Tensor,
    pub adversarial: Tensor,
}

impl From<&AdversarialExample> for AttackItem {
    fn from(e: &AdversarialExample) -> Self {
        AttackItem {
            source_index: e.source_index,
            true_label: e.true_label,
            target: e.target,
            perturbation: e.perturbation,
            origin: AttackOrigin::Single { member: e.crafted_on },
            original: e.original.clone(),
            adversarial: e.adversarial.clone(),
        }
    }
}

impl AttackItem {
    pub fn superimposed(
        examples: &[AdversarialExample],
        chosen: &[usize],
        adversarial: Tensor,
    ) -> Result<Self> {
        let first = &examples[0];
        Ok(AttackItem {
            source_index: first.source_index,
            true_label: first.true_label,
            target: first.target,
            perturbation: perturbation(&adversarial, &first.original)?,
            origin: AttackOrigin::Superimposed {
                members: chosen.iter().map(|&i| examples[i].crafted_on).collect(),
            },
            original: first.original.clone(),
            adversarial,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyVariant {
    pub name: String,
    pub policy: QueryPolicy,
}

impl PolicyVariant {
    pub fn new(name: impl Into<String>, policy: QueryPolicy) -> Self {
        PolicyVariant { name: name.into(), policy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    Target,
    Other,
    Abstain,
}

impl Outcome {
    pub fn classify(label: Label, true_label: usize, target: usize) -> Outcome {
        match label {
            Label::Abstain => Outcome::Abstain,
            Label::Class(c) if c == true_label => Outcome::Correct,
            Label::Class(c) if c == target => Outcome::Target,
            Label::Class(_) => Outcome::Other,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// One model variant's row. Percentages are in `[0, 100]`; accuracies with
/// an `_answered` suffix exclude abstentions and are `None` when nothing was
/// answered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeRow {
    pub variant: String,
    pub count: usize,
    pub clean_accuracy_answered: Option<f64>,
    pub clean_accuracy: f64,
    pub attack_accuracy_answered: Option<f64>,
    pub attack_accuracy: f64,
    pub correct_pct: f64,
    pub target_pct: f64,
    pub other_pct: f64,
    pub abstain_pct: f64,
    pub mean_perturbation: [Option<f64>; 4],
}

impl OutcomeRow {
    fn build(variant: &str, clean: &[Outcome], attacked: &[(Outcome, f64)]) -> OutcomeRow {
        let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let answered_pct = |correct: usize, abstain: usize, total: usize| {
            (total > abstain).then(|| pct(correct, total - abstain))
        };

        let clean_correct = clean.iter().filter(|o| **o == Outcome::Correct).count();
        let clean_abstain = clean.iter().filter(|o| **o == Outcome::Abstain).count();

        let mut counts = [0usize; 4];
        let mut sums = [0.0f64; 4];
        for &(o, p) in attacked {
            counts[o.slot()] += 1;
            sums[o.slot()] += p;
        }
        let n = attacked.len();
        OutcomeRow {
            variant: variant.to_string(),
            count: n,
            clean_accuracy_answered: answered_pct(clean_correct, clean_abstain, clean.len()),
            clean_accuracy: pct(clean_correct, clean.len()),
            attack_accuracy_answered: answered_pct(counts[0], counts[3], n),
            attack_accuracy: pct(counts[0], n),
            correct_pct: pct(counts[0], n),
            target_pct: pct(counts[1], n),
            other_pct: pct(counts[2], n),
            abstain_pct: pct(counts[3], n),
            mean_perturbation: std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64)),
        }
    }

    pub fn pct_total(&self) -> f64 {
        self.correct_pct + self.target_pct + self.other_pct + self.abstain_pct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeTable {
    pub attack: String,
    pub rows: Vec<OutcomeRow>,
}

impl OutcomeTable {
    pub fn row(&self, variant: &str) -> Option<&OutcomeRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub const CSV_HEADER: &'static str = "attack,variant,count,clean_accuracy_answered,clean_accuracy,\
attack_accuracy_answered,attack_accuracy,correct_pct,target_pct,other_pct,abstain_pct,\
perturbation_correct,perturbation_target,perturbation_other,perturbation_abstain";

    pub fn write_csv_rows(&self, out: &mut String) {
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.attack,
                r.variant,
                r.count,
                opt(r.clean_accuracy_answered),
                r.clean_accuracy,
                opt(r.attack_accuracy_answered),
                r.attack_accuracy,
                r.correct_pct,
                r.target_pct,
                r.other_pct,
                r.abstain_pct,
            );
            for m in r.mean_perturbation {
                let _ = write!(out, ",{}", opt(m));
            }
            out.push('\n');
        }
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The distinct originals among `items`, in first-appearance order.
fn originals(items: &[AttackItem]) -> Vec<(&Tensor, usize, usize)> {
    let mut seen = std::collections::BTreeSet::new();
    items
        .iter()
        .filter(|i| seen.insert(i.source_index))
        .map(|i| (&i.original, i.true_label, i.source_index))
        .collect()
}

/// Classify every attack input (and every distinct clean original) through
/// each variant's query path and tally the outcomes.
pub fn evaluate_outcomes<C: Classifier>(
    ens: &Ensemble<C>,
    attack: &str,
    items: &[AttackItem],
    variants: &[PolicyVariant],
) -> Result<OutcomeTable> {
    let clean_inputs = originals(items);
    let rows = variants
        .iter()
        .map(|v| {
            let clean_policy = QueryPolicy {
                seed: rng::derive_seed(v.policy.seed, "clean-queries", 0),
                ..v.policy
            };
            let clean = clean_inputs
                .par_iter()
                .map(|&(x, y, idx)| {
                    let r = noisy_query(ens, x, &clean_policy, idx as u64)?;
                    Ok(Outcome::classify(r.label, y, usize::MAX))
                })
                .collect::<Result<Vec<_>>>()?;
            let attacked = items
                .par_iter()
                .enumerate()
                .map(|(i, it)| {
                    let r = noisy_query(ens, &it.adversarial, &v.policy, i as u64)?;
                    Ok((Outcome::classify(r.label, it.true_label, it.target), it.perturbation))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OutcomeRow::build(&v.name, &clean, &attacked))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OutcomeTable {
        attack: attack.to_string(),
        rows,
    })
}

/// The "single network" row: each example judged only by the member it was
/// crafted on, without noise.
pub fn single_network_row<C: Classifier>(
    ens: &Ensemble<C>,
    examples: &[AdversarialExample],
) -> Result<OutcomeRow> {
    let member = |e: &AdversarialExample| {
        ens.members()
            .get(e.crafted_on)
            .ok_or(Error::IndexOutOfRange { index: e.crafted_on, len: ens.len() })
    };
    let clean = examples
        .iter()
        .map(|e| Ok(Outcome::classify(Label::Class(member(e)?.classify(e.original.data())), e.true_label, usize::MAX)))
        .collect::<Result<Vec<_>>>()?;
    let attacked = examples
        .iter()
        .map(|e| {
            let c = member(e)?.classify(e.adversarial.data());
            Ok((Outcome::classify(Label::Class(c), e.true_label, e.target), e.perturbation))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OutcomeRow::build("single", &clean, &attacked))
}

/// Raw tallies for one perturbation bin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BinCounts {
    pub examples: usize,
    pub member_to_target: usize,
    pub member_to_other: usize,
    pub ensemble_to_target: usize,
    pub ensemble_to_other: usize,
    pub ensemble_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinSeries {
    pub max_perturbation: f64,
    pub width: f64,
    /// Total example count `N`.
    pub total: usize,
    pub bins: Vec<BinCounts>,
}

impl BinSeries {
    pub fn midpoint(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.width
    }

    /// Mean number of members whose label changed to the target.
    pub fn members_to_target(&self, b: usize) -> f64 {
        mean(self.bins[b].member_to_target, self.bins[b].examples)
    }

    /// Mean number of members whose label changed to a non-target label.
    pub fn members_to_other(&self, b: usize) -> f64 {
        mean(self.bins[b].member_to_other, self.bins[b].examples)
    }

    /// Ensemble changes to the target, normalized by `N`.
    pub fn ensemble_to_target(&self, b: usize) -> f64 {
        mean(self.bins[b].ensemble_to_target, self.total)
    }

    pub fn ensemble_to_other(&self, b: usize) -> f64 {
        mean(self.bins[b].ensemble_to_other, self.total)
    }

    pub fn ensemble_accuracy(&self, b: usize) -> Option<f64> {
        let c = &self.bins[b];
        (c.examples > 0).then(|| c.ensemble_correct as f64 / c.examples as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "bin,midpoint,examples,members_to_target,members_to_other,ensemble_to_target,ensemble_to_other,ensemble_accuracy\n",
        );
        for b in 0..self.bins.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b,
                self.midpoint(b),
                self.bins[b].examples,
                self.members_to_target(b),
                self.members_to_other(b),
                self.ensemble_to_target(b),
                self.ensemble_to_other(b),
                opt(self.ensemble_accuracy(b)),
            );
        }
        out
    }
}

fn mean(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-example flip tallies before binning.
pub fn flip_counts<C: Classifier>(ens: &Ensemble<C>, item: &AttackItem) -> Result<BinCounts> {
    ens.check_input(&item.adversarial)?;
    let before = ens.predictions_raw(item.original.data());
    let after = ens.predictions_raw(item.adversarial.data());
    let mut c = BinCounts { examples: 1, ..Default::default() };
    for (b, a) in before.iter().zip(&after) {
        if a != b {
            if *a == item.target {
                c.member_to_target += 1;
            } else {
                c.member_to_other += 1;
            }
        }
    }
    let vote_before = crate::defense::VoteResult::from_predictions(&before, ens.label_count()).label;
    let vote_after = crate::defense::VoteResult::from_predictions(&after, ens.label_count()).label;
    if vote_after != vote_before {
        if vote_after == Label::Class(item.target) {
            c.ensemble_to_target = 1;
        } else {
            c.ensemble_to_other = 1;
        }
    }
    c.ensemble_correct = usize::from(vote_after == Label::Class(item.true_label));
    Ok(c)
}

/// Bucket `items` into `bin_count` equal-width bins over
/// `[0, max perturbation]` and accumulate member and ensemble flips.
pub fn transfer_series<C: Classifier>(
    ens: &Ensemble<C>,
    items: &[AttackItem],
    bin_count: usize,
) -> Result<BinSeries> {
    if items.is_empty() {
        return Err(Error::InsufficientExamples { needed: 1, found: 0 });
    }
    if bin_count == 0 {
        return Err(Error::Parameter("bin_count must be at least 1".into()));
    }
    let per_item = items
        .par_iter()
        .map(|it| flip_counts(ens, it))
        .collect::<Result<Vec<_>>>()?;
    let max = items.iter().map(|i| i.perturbation).fold(0.0, f64::max);
    let width = max / bin_count as f64;
    let mut bins = vec![BinCounts::default(); bin_count];
    for (it, c) in items.iter().zip(per_item) {
        let b = if width > 0.0 {
            ((it.perturbation / width) as usize).min(bin_count - 1)
        } else {
            0
        };
        let slot = &mut bins[b];
        slot.examples += c.examples;
        slot.member_to_target += c.member_to_target;
        slot.member_to_other += c.member_to_other;
        slot.ensemble_to_target += c.ensemble_to_target;
        slot.ensemble_to_other += c.ensemble_to_other;
        slot.ensemble_correct += c.ensemble_correct;
    }
    Ok(BinSeries {
        max_perturbation: max,
        width,
        total: items.len(),
        bins,
    })
}

/// Member `l`'s label for the example crafted on it, under `policy`'s input
/// noise. Rank verification does not apply to a single voter.
pub fn grid_from_examples<C: Classifier>(
    ens: &Ensemble<C>,
    examples: &[AdversarialExample],
    policy: &QueryPolicy,
) -> Result<Vec<usize>> {
    policy.validate()?;
    let mut grid = vec![usize::MAX; ens.len()];
    for e in examples {
        let member = ens
            .members()
            .get(e.crafted_on)
            .ok_or(Error::IndexOutOfRange { index: e.crafted_on, len: ens.len() })?;
        let mut r = policy.query_rng(e.crafted_on as u64);
        let x = perturb_input(e.adversarial.data(), policy.noise_sigma, &mut r);
        grid[e.crafted_on] = member.classify(&x);
    }
    if let Some(l) = grid.iter().position(|&g| g == usize::MAX) {
        return Err(Error::Consistency(format!("no example crafted on member {l}")));
    }
    Ok(grid)
}

/// Craft `A(F^l, s, t)` on every member and report each member's label for
/// its own example.
pub fn network_grid(
    ens: &Ensemble<Network>,
    s: &Tensor,
    t: usize,
    cfg: &AttackConfig,
    policy: &QueryPolicy,
) -> Result<Vec<usize>> {
    let examples = ens
        .members()
        .par_iter()
        .enumerate()
        .map(|(l, net)| {
            let c = AttackConfig { seed: rng::derive_seed(cfg.seed, "grid", l as u64), ..*cfg };
            let mut e = craft(net, s, t, &c)?;
            e.crafted_on = l;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    grid_from_examples(ens, &examples, policy)
}

/// Rows of `width` space-separated labels.
pub fn format_grid(labels: &[usize], width: usize) -> String {
    labels
        .chunks(width.max(1))
        .map(|row| row.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::ConstantClassifier;

    fn item(src: usize, y: usize, t: usize, orig: &[f64], adv: &[f64]) -> AttackItem {
        let original = Tensor::vector(orig.to_vec()).unwrap();
        let adversarial = Tensor::vector(adv.to_vec()).unwrap();
        AttackItem {
            source_index: src,
            true_label: y,
            target: t,
            perturbation: perturbation(&adversarial, &original).unwrap(),
            origin: AttackOrigin::Single { member: 0 },
            original,
            adversarial,
        }
    }

    /// Predicts 1 when the first coordinate exceeds `cut`, else 0.
    struct Threshold {
        cut: f64,
    }

    impl Classifier for Threshold {
        fn input_shape(&self) -> &[usize] {
            &[2]
        }
        fn label_count(&self) -> usize {
            3
        }
        fn logits_of(&self, x: &[f64]) -> Vec<f64> {
            if x[0] > self.cut {
                vec![0.0, 1.0, 0.0]
            } else {
                vec![1.0, 0.0, 0.0]
            }
        }
    }

    fn thresholds(cuts: &[f64]) -> Ensemble<Threshold> {
        Ensemble::new(cuts.iter().map(|&cut| Threshold { cut }).collect()).unwrap()
    }

    #[test]
    fn zero_delta_keeps_clean_accuracy() {
        let ens = thresholds(&[0.5, 0.5, 0.5]);
        let items = vec![
            item(0, 0, 1, &[0.2, 0.3], &[0.2, 0.3]),
            item(1, 1, 0, &[0.9, 0.3], &[0.9, 0.3]),
            item(2, 1, 2, &[0.1, 0.3], &[0.1, 0.3]),
        ];
        let t = evaluate_outcomes(&ens, "none", &items, &[PolicyVariant::new("plain", QueryPolicy::plain())]).unwrap();
        let r = t.row("plain").unwrap();
        assert!((r.correct_pct - r.clean_accuracy).abs() < 1e-12);
        assert!((r.pct_total() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn target_stub_gives_full_target_share() {
        let ens = Ensemble::new(vec![ConstantClassifier::new(2, &[2], 3); 3]).unwrap();
        let items = vec![item(0, 0, 2, &[0.2, 0.3], &[0.25, 0.3]), item(1, 1, 2, &[0.6, 0.3], &[0.6, 0.4])];
        let variants = [
            PolicyVariant::new("plain", QueryPolicy::plain()),
            PolicyVariant::new("nl", QueryPolicy::noisy(0.2, 1)),
        ];
        let t = evaluate_outcomes(&ens, "stub", &items, &variants).unwrap();
        for r in &t.rows {
            assert_eq!(r.target_pct, 100.0);
            assert_eq!(r.attack_accuracy, 0.0);
            assert!(r.mean_perturbation[1].is_some() && r.mean_perturbation[0].is_none());
        }
    }

    #[test]
    fn abstentions_are_counted_and_excluded_from_answered() {
        // three distinct constant voters never pass rank verification
        let ens = Ensemble::new((0..3).map(|c| ConstantClassifier::new(c, &[2], 3)).collect()).unwrap();
        let items = vec![item(0, 0, 1, &[0.2, 0.3], &[0.2, 0.3])];
        let v = PolicyVariant::new("nl_rv", QueryPolicy::plain().with_rank_verification(0.05));
        let r = evaluate_outcomes(&ens, "x", &items, &[v]).unwrap().rows.remove(0);
        assert_eq!(r.abstain_pct, 100.0);
        assert_eq!(r.attack_accuracy_answered, None);
        assert_eq!(r.attack_accuracy, 0.0);
    }

    #[test]
    fn bins_hand_count() {
        // one member of four flips to the target
        let ens = thresholds(&[0.5, 0.9, 0.9, 0.9]);
        let items = vec![item(0, 0, 1, &[0.4, 0.3], &[0.6, 0.3])];
        let s = transfer_series(&ens, &items, 4).unwrap();
        assert_eq!(s.members_to_target(3), 1.0);
        for b in 0..3 {
            assert_eq!(s.members_to_target(b), 0.0);
        }
        assert_eq!(s.bins.iter().map(|b| b.ensemble_to_target).sum::<usize>(), 0);
    }

    #[test]
    fn zero_delta_has_no_flips() {
        let ens = thresholds(&[0.5, 0.3]);
        let items = vec![item(0, 0, 1, &[0.4, 0.3], &[0.4, 0.3]); 3];
        let s = transfer_series(&ens, &items, 40).unwrap();
        assert!(s.bins.iter().all(|b| b.member_to_target + b.member_to_other == 0));
        assert_eq!(s.bins[0].examples, 3);
        assert!(transfer_series(&ens, &[], 40).is_err());
    }

    #[test]
    fn bin_conservation() {
        let ens = thresholds(&[0.3, 0.5, 0.7]);
        let items: Vec<_> = (0..20)
            .map(|i| {
                let x = 0.2 + 0.01 * i as f64;
                item(i, 0, 1, &[0.25, 0.5], &[x, 0.5])
            })
            .collect();
        let s = transfer_series(&ens, &items, 5).unwrap();
        let mut flips = 0;
        let mut changes = 0;
        for it in &items {
            let c = flip_counts(&ens, it).unwrap();
            flips += c.member_to_target + c.member_to_other;
            changes += c.ensemble_to_target + c.ensemble_to_other;
        }
        let binned: usize = s.bins.iter().map(|b| b.member_to_target + b.member_to_other).sum();
        let binned_changes: usize = s.bins.iter().map(|b| b.ensemble_to_target + b.ensemble_to_other).sum();
        assert_eq!(binned, flips);
        assert_eq!(binned_changes, changes);
        assert_eq!(s.bins.iter().map(|b| b.examples).sum::<usize>(), 20);
        assert!((s.midpoint(4) - 0.9 * s.max_perturbation).abs() < 1e-12);
    }

    #[test]
    fn stub_grid_reports_constants() {
        let ens = Ensemble::new((0..7).map(|l| ConstantClassifier::new(l % 3, &[2], 3)).collect()).unwrap();
        let examples: Vec<_> = (0..7)
            .map(|l| {
                let s = Tensor::vector(vec![0.5, 0.5]).unwrap();
                AdversarialExample {
                    source_index: 0,
                    true_label: 0,
                    original: s.clone(),
                    adversarial: s.clone(),
                    delta: Tensor::zeros(vec![2]),
                    target: 1,
                    crafted_on: l,
                    perturbation: 0.0,
                    success_on_crafted: false,
                }
            })
            .collect();
        let grid = grid_from_examples(&ens, &examples, &QueryPolicy::plain()).unwrap();
        assert_eq!(grid, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(format_grid(&grid, 5), "0 1 2 0 1\n2 0\n");
    }
}
