//! Ensemble voting, query-time input noise ("noisy logits"), and rank
//! verification.
//!
//! The combined classifier is the plurality vote
//! `F*(x) = argmax_y Σ_l 1[F^l(x) = y]`, ties going to the lowest class
//! index. The noisy variant answers each query with `F*(clip(x + ε))` for a
//! fresh `ε ~ N(0, σ²I)` shared by every member, and can refuse to answer
//! when an exact binomial test cannot separate the top two vote counts.

use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::rng;
use crate::stats::binom_test_two_sided;
use crate::tensor::{argmax, Tensor};

/// Anything that maps an input to a logit vector.
pub trait Classifier: Send + Sync {
    fn input_shape(&self) -> &[usize];
    fn label_count(&self) -> usize;
    /// Logits for a flat input of the right length.
    fn logits_of(&self, x: &[f64]) -> Vec<f64>;

    fn classify(&self, x: &[f64]) -> usize {
        argmax(&self.logits_of(x))
    }
}

impl Classifier for Network {
    fn input_shape(&self) -> &[usize] {
        Network::input_shape(self)
    }

    fn label_count(&self) -> usize {
        Network::label_count(self)
    }

    fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        self.logits_raw(x)
    }
}

/// A stand-in member that predicts one fixed class regardless of input.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    pub label: usize,
    pub input_shape: Vec<usize>,
    pub label_count: usize,
}

impl ConstantClassifier {
    pub fn new(label: usize, input_shape: &[usize], label_count: usize) -> Self {
        ConstantClassifier {
            label,
            input_shape: input_shape.to_vec(),
            label_count,
        }
    }
}

impl Classifier for ConstantClassifier {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn label_count(&self) -> usize {
        self.label_count
    }

    fn logits_of(&self, _x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.label_count];
        z[self.label] = 1.0;
        z
    }
}

/// An ordered, non-empty collection of classifiers over one input space.
#[derive(Debug, Clone)]
pub struct Ensemble<C = Network> {
    members: Vec<C>,
    label_count: usize,
}

impl<C: Classifier> Ensemble<C> {
    pub fn new(members: Vec<C>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Parameter("an ensemble needs at least one member".into()));
        };
        let shape = first.input_shape().to_vec();
        let label_count = first.label_count();
        if label_count < 2 {
            return Err(Error::Parameter("members need at least two labels".into()));
        }
        for (l, m) in members.iter().enumerate() {
            if m.input_shape() != shape.as_slice() || m.label_count() != label_count {
                return Err(Error::Consistency(format!(
                    "member {l} disagrees on input shape or label count"
                )));
            }
        }
        Ok(Ensemble {
            members,
            label_count,
        })
    }

    pub fn members(&self) -> &[C] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(self.input_shape(), x.shape()));
        }
        Ok(())
    }

    /// Each member's classification of `x`, in member order.
    pub fn predictions(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x)?;
        Ok(self.predictions_raw(x.data()))
    }

    pub(crate) fn predictions_raw(&self, x: &[f64]) -> Vec<usize> {
        self.members.iter().map(|m| m.classify(x)).collect()
    }

    pub(crate) fn vote_raw(&self, x: &[f64]) -> VoteResult {
        VoteResult::from_predictions(&self.predictions_raw(x), self.label_count)
    }
}

/// A prediction or a refusal to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(usize),
    Abstain,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Abstain => None,
        }
    }

    pub fn is_abstain(self) -> bool {
        self == Label::Abstain
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Abstain => f.write_str("abstain"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Class(c) => s.serialize_u64(*c as u64),
            Label::Abstain => s.serialize_str("abstain"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LabelVisitor;
        impl Visitor<'_> for LabelVisitor {
            type Value = Label;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a class index or \"abstain\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Label, E> {
                Ok(Label::Class(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Label, E> {
                usize::try_from(v)
                    .map(Label::Class)
                    .map_err(|_| E::custom("negative class index"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Label, E> {
                if v == "abstain" {
                    Ok(Label::Abstain)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(LabelVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Top2 {
    pub y_a: usize,
    pub n_a: usize,
    pub y_b: usize,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub label: Label,
    pub counts: Vec<usize>,
    pub top2: Top2,
    pub rv_pvalue: Option<f64>,
}

impl VoteResult {
    /// Tally member predictions. The winner is the most-voted class, lowest
    /// index on ties; the runner-up is chosen the same way among the rest.
    pub fn from_predictions(predictions: &[usize], label_count: usize) -> VoteResult {
        let mut counts = vec![0usize; label_count];
        for &p in predictions {
            counts[p] += 1;
        }
        let y_a = top_index(&counts, None);
        let y_b = top_index(&counts, Some(y_a));
        VoteResult {
            label: Label::Class(y_a),
            top2: Top2 {
                y_a,
                n_a: counts[y_a],
                y_b,
                n_b: counts[y_b],
            },
            counts,
            rv_pvalue: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vote results always serialize")
    }
}

fn top_index(counts: &[usize], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (i, &c) in counts.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|b| c > counts[b]) {
            best = Some(i);
        }
    }
    best.expect("label_count >= 2")
}

/// Plurality vote of the ensemble on `x`.
pub fn vote<C: Classifier>(ens: &Ensemble<C>, x: &Tensor) -> Result<VoteResult> {
    ens.check_input(x)?;
    Ok(ens.vote_raw(x.data()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
}

/// How queries are answered: input noise scale, optional rank verification
/// at significance `rv_alpha`, and the root seed for noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPolicy {
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    pub rv_alpha: Option<f64>,
    pub seed: u64,
}

impl QueryPolicy {
    /// Plain voting: no noise, no rank verification.
    pub fn plain() -> Self {
        QueryPolicy {
            noise_sigma: 0.0,
            noise_kind: NoiseKind::Gaussian,
            rv_alpha: None,
            seed: 0,
        }
    }

    pub fn noisy(sigma: f64, seed: u64) -> Self {
        QueryPolicy {
            noise_sigma: sigma,
            seed,
            ..QueryPolicy::plain()
        }
    }

    pub fn with_rank_verification(self, alpha: f64) -> Self {
        QueryPolicy {
            rv_alpha: Some(alpha),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if let Some(a) = self.rv_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Parameter(format!(
                    "rank-verification alpha must lie in (0, 1), got {a}"
                )));
            }
        }
        Ok(())
    }

    /// The noise generator for query number `query_index`.
    pub fn query_rng(&self, query_index: u64) -> rng::StreamRng {
        rng::stream(self.seed, "query", query_index)
    }
}

/// `clip(x + ε)` with `ε ~ N(0, σ²I)` drawn from `rng`; `x` itself when σ = 0.
pub(crate) fn perturb_input<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    rng::gaussian_vec(rng, x.len(), sigma)
        .into_iter()
        .zip(x)
        .map(|(e, v)| (v + e).clamp(0.0, 1.0))
        .collect()
}

/// Apply the policy to a clean vote: rank verification and abstention.
pub(crate) fn finish_vote(mut result: VoteResult, policy: &QueryPolicy) -> Result<VoteResult> {
    if let Some(alpha) = policy.rv_alpha {
        let rv = rank_verify(result.top2.n_a, result.top2.n_b, alpha)?;
        result.rv_pvalue = Some(rv.pvalue);
        if !rv.pass {
            result.label = Label::Abstain;
        }
    }
    Ok(result)
}

/// Answer one query under `policy`. Each `query_index` selects an
/// independent noise draw, shared across all members.
pub fn noisy_query<C: Classifier>(
    ens: &Ensemble<C>,
    x: &Tensor,
    policy: &QueryPolicy,
    query_index: u64,
) -> Result<VoteResult> {
    policy.validate()?;
    ens.check_input(x)?;
    let mut rng = policy.query_rng(query_index);
    noisy_query_with(ens, x.data(), policy, &mut rng)
}

pub(crate) fn noisy_query_with<C: Classifier, R: Rng + ?Sized>(
    ens: &Ensemble<C>,
    x: &[f64],
    policy: &QueryPolicy,
    rng: &mut R,
) -> Result<VoteResult> {
    let noisy = perturb_input(x, policy.noise_sigma, rng);
    finish_vote(ens.vote_raw(&noisy), policy)
}

/// A stateful query endpoint: every call draws fresh noise, and the sequence
/// of answers is reproducible from the policy seed.
#[derive(Debug, Clone)]
pub struct QueryStream {
    policy: QueryPolicy,
    next_index: u64,
}

impl QueryStream {
    pub fn new(policy: QueryPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(QueryStream {
            policy,
            next_index: 0,
        })
    }

    pub fn query<C: Classifier>(&mut self, ens: &Ensemble<C>, x: &Tensor) -> Result<VoteResult> {
        let r = noisy_query(ens, x, &self.policy, self.next_index)?;
        self.next_index += 1;
        Ok(r)
    }
}

/// The output of stage `layer_index` for the perturbed input `x + ε`.
///
/// The forward pass is genuine, so every stage, including the final softmax,
/// is consistent with the noisy logit. Unlike [`noisy_query`] the perturbed
/// input is not clipped: the caller sees exactly `F_i ∘ … ∘ F_1(x + ε)`.
pub fn noisy_layer_output(
    net: &Network,
    x: &Tensor,
    layer_index: usize,
    policy: &QueryPolicy,
    query_index: u64,
) -> Result<Tensor> {
    policy.validate()?;
    net.check_input(x)?;
    if layer_index >= net.stage_count() {
        return Err(Error::IndexOutOfRange {
            index: layer_index,
            len: net.stage_count(),
        });
    }
    let noisy = if policy.noise_sigma == 0.0 {
        x.clone()
    } else {
        let mut rng = policy.query_rng(query_index);
        let eps = rng::gaussian_vec(&mut rng, x.len(), policy.noise_sigma);
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(eps).map(|(v, e)| v + e).collect(),
        )?
    };
    net.stage_output(&noisy, layer_index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankVerification {
    pub pvalue: f64,
    pub pass: bool,
}

/// Exact two-sided binomial test of `n_a` successes in `n_a + n_b` trials at
/// probability 1/2; passes when the p-value is below `alpha`.
pub fn rank_verify(n_a: usize, n_b: usize, alpha: f64) -> Result<RankVerification> {
    if n_a < n_b || n_a + n_b == 0 {
        return Err(Error::InvalidCounts(format!(
            "rank verification needs n_a >= n_b and n_a + n_b >= 1, got ({n_a}, {n_b})"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pvalue = binom_test_two_sided(n_a as u64, (n_a + n_b) as u64, 0.5)?;
    Ok(RankVerification {
        pvalue,
        pass: pvalue < alpha,
    })
}

/// Monte Carlo estimate of the probability that a plurality vote is correct
/// when members err independently.
///
/// Each trial draws a true class uniformly, lets member `l` vote for it with
/// probability `member_accuracies[l]` and otherwise for one of the remaining
/// classes uniformly, and scores the plurality winner (lowest index on ties).
pub fn voting_success_probability(
    member_accuracies: &[f64],
    label_count: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if member_accuracies.is_empty() {
        return Err(Error::Parameter("need at least one member accuracy".into()));
    }
    if label_count < 2 {
        return Err(Error::Parameter("need at least two labels".into()));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    if let Some(a) = member_accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Parameter(format!("accuracy {a} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, "voting-success", 0);
    let mut votes = vec![0usize; member_accuracies.len()];
    let mut wins = 0usize;
    for _ in 0..trials {
        let truth = rng.random_range(0..label_count);
        for (v, &acc) in votes.iter_mut().zip(member_accuracies) {
            *v = if rng.random::<f64>() < acc {
                truth
            } else {
                let other = rng.random_range(0..label_count - 1);
                if other >= truth {
                    other + 1
                } else {
                    other
                }
            };
        }
        if VoteResult::from_predictions(&votes, label_count).top2.y_a == truth {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials as f64)
}
