//! Targeted penalty attacks and greedy superimposition.
//!
//! [`craft`] solves `min ‖x′ − s‖² + c·L(x′, t)` over the unit box, where
//! `L` is either the network's own cross-entropy toward `t` or the logit
//! margin `max(max_{i≠t} z_i − z_t, −κ)`. The box is removed by writing
//! `x′ = (tanh w + 1)/2` and optimizing `w` with Adam; an outer search over
//! `c` keeps the smallest-distortion success.
//!
//! Weighting the penalty (rather than the distance) by `c` is the same
//! family of problems with `c` inverted; it lets the search grow `c` until
//! the first success and then bisect.

use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defense::Ensemble;
use crate::error::{Error, Result};
use crate::net::{CrossEntropy, LogitObjective, Network};
use crate::rng;
use crate::tensor::{argmax, Tensor};

/// `p(a; s) = ‖a − s‖₂ / ‖s‖₂`.
pub fn perturbation(a: &Tensor, s: &Tensor) -> Result<f64> {
    a.check_same_shape(s)?;
    let norm_s = s.l2_norm();
    if norm_s == 0.0 {
        return Err(Error::UndefinedMetric);
    }
    let diff: f64 = a
        .data()
        .iter()
        .zip(s.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm_s)
}

/// `max(max_{i≠t} z_i − z_t, −κ)`: non-positive once `t` leads by at least κ.
pub fn margin_penalty(z: &Tensor, target: usize, kappa: f64) -> f64 {
    MarginPenalty { target, kappa }.value(z.data())
}

#[derive(Debug, Clone, Copy)]
pub struct MarginPenalty {
    pub target: usize,
    pub kappa: f64,
}

impl MarginPenalty {
    fn runner_up(&self, z: &[f64]) -> usize {
        let mut best: Option<usize> = None;
        for (i, &v) in z.iter().enumerate() {
            if i != self.target && best.is_none_or(|b| v > z[b]) {
                best = Some(i);
            }
        }
        best.expect("at least two labels")
    }
}

impl LogitObjective for MarginPenalty {
    fn value(&self, z: &[f64]) -> f64 {
        (z[self.runner_up(z)] - z[self.target]).max(-self.kappa)
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        let other = self.runner_up(z);
        if z[other] - z[self.target] > -self.kappa {
            g[other] = 1.0;
            g[self.target] = -1.0;
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// Cross-entropy of the crafted network's tempered softmax toward `t`.
    Loss,
    /// Logit margin with confidence κ.
    Margin,
}

/// What the attacker can query while crafting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSurface {
    CleanLogits,
    /// Every logit or gradient query is answered at `clip(x′ + ε)`,
    /// `ε ~ N(0, σ²I)` drawn fresh per query.
    NoisyLogits { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub penalty_kind: PenaltyKind,
    pub c_init: f64,
    pub c_search_steps: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub kappa: f64,
    pub seed: u64,
    pub attack_surface: AttackSurface,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            penalty_kind: PenaltyKind::Margin,
            c_init: 1e-2,
            c_search_steps: 8,
            iterations: 200,
            step_size: 0.05,
            kappa: 0.0,
            seed: 0,
            attack_surface: AttackSurface::CleanLogits,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_init > 0.0) {
            return Err(Error::Parameter("c_init must be positive".into()));
        }
        if self.iterations == 0 || self.c_search_steps == 0 {
            return Err(Error::Parameter(
                "iterations and c_search_steps must be at least 1".into(),
            ));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Parameter("step_size must be positive".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Parameter("kappa must be non-negative".into()));
        }
        if let AttackSurface::NoisyLogits { sigma } = self.attack_surface {
            if !(sigma >= 0.0) {
                return Err(Error::Parameter("surface sigma must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub source_index: usize,
    pub true_label: usize,
    pub original: Tensor,
    pub adversarial: Tensor,
    pub delta: Tensor,
    pub target: usize,
    pub crafted_on: usize,
    pub perturbation: f64,
    pub success_on_crafted: bool,
}

impl AdversarialExample {
    /// `‖a − s‖₂`, the absolute distortion.
    pub fn l2_distortion(&self) -> f64 {
        self.delta.l2_norm()
    }
}

/// One round of the outer search over `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRound {
    pub c: f64,
    pub success: bool,
    /// Smallest successful distortion found so far, across all rounds.
    pub best_l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CraftOutcome {
    pub example: AdversarialExample,
    pub rounds: Vec<SearchRound>,
}

/// Answers logit and gradient queries for one network on one surface.
struct Surface<'a> {
    net: &'a Network,
    sigma: Option<f64>,
    rng: rng::StreamRng,
}

impl Surface<'_> {
    /// Logits at (a possibly noised copy of) `x`, plus the input gradient of
    /// `objective` through the same evaluation.
    fn query(&mut self, x: &[f64], objective: &dyn LogitObjective) -> (Vec<f64>, Vec<f64>) {
        match self.sigma {
            None | Some(0.0) => {
                let (z, _, g) = self.net.objective_and_gradient(x, objective);
                (z, g)
            }
            Some(sigma) => {
                let raw: Vec<f64> = x
                    .iter()
                    .map(|v| v + sigma * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let noisy: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let (z, _, mut g) = self.net.objective_and_gradient(&noisy, objective);
                for (gi, r) in g.iter_mut().zip(&raw) {
                    if !(0.0..=1.0).contains(r) {
                        *gi = 0.0;
                    }
                }
                (z, g)
            }
        }
    }

    fn predict(&mut self, x: &[f64]) -> usize {
        argmax(&self.query(x, &crate::net::LogitComponent(0)).0)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            w[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn to_box(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| ((v.tanh() + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Craft a targeted example on `net` and report the search trace.
pub fn craft_traced(
    net: &Network,
    s: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<CraftOutcome> {
    cfg.validate()?;
    net.check_input(s)?;
    if target >= net.label_count() {
        return Err(Error::Parameter(format!("target {target} is not a label")));
    }
    if !s.in_unit_box() {
        return Err(Error::Data("attack input must lie in [0, 1]".into()));
    }
    let true_label = net.predict_raw(s.data());
    let sigma = match cfg.attack_surface {
        AttackSurface::CleanLogits => None,
        AttackSurface::NoisyLogits { sigma } => Some(sigma),
    };
    let mut surface = Surface {
        net,
        sigma,
        rng: rng::stream(cfg.seed, "craft-surface", 0),
    };
    let objective: Box<dyn LogitObjective> = match cfg.penalty_kind {
        PenaltyKind::Margin => Box::new(MarginPenalty {
            target,
            kappa: cfg.kappa,
        }),
        PenaltyKind::Loss => Box::new(CrossEntropy {
            label: target,
            temperature: net.temperature(),
        }),
    };

    let finish = |adv: Vec<f64>, rounds: Vec<SearchRound>| -> Result<CraftOutcome> {
        let adversarial = Tensor::new(s.shape().to_vec(), adv)?;
        let delta = adversarial.sub(s)?;
        let success_on_crafted = net.predict_raw(adversarial.data()) == target;
        Ok(CraftOutcome {
            example: AdversarialExample {
                source_index: 0,
                true_label,
                perturbation: perturbation(&adversarial, s)?,
                original: s.clone(),
                adversarial,
                delta,
                target,
                crafted_on: 0,
                success_on_crafted,
            },
            rounds,
        })
    };

    if surface.predict(s.data()) == target {
        return finish(s.data().to_vec(), Vec::new());
    }

    let src = s.data();
    let w0: Vec<f64> = src
        .iter()
        .map(|v| ((2.0 * v - 1.0) * (1.0 - 1e-6)).atanh())
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    // closest failed iterate, by penalty value, for when nothing succeeds
    let mut fallback: (f64, Vec<f64>) = (f64::INFINITY, src.to_vec());
    let mut rounds = Vec::with_capacity(cfg.c_search_steps);
    let (mut lo, mut hi): (f64, Option<f64>) = (0.0, None);
    let mut c = cfg.c_init;

    for _ in 0..cfg.c_search_steps {
        let mut w = w0.clone();
        let mut adam = Adam::new(w.len(), cfg.step_size);
        let mut round_success = false;
        for _ in 0..cfg.iterations {
            let x = to_box(&w);
            let (z, gpen) = surface.query(&x, objective.as_ref());
            let pen = objective.value(&z);
            if !pen.is_finite() || gpen.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric("attack objective became non-finite".into()));
            }
            let d2 = sq_dist(&x, src);
            if argmax(&z) == target {
                round_success = true;
                if best.as_ref().is_none_or(|(b, _)| d2 < *b) {
                    best = Some((d2, x.clone()));
                }
            } else if pen < fallback.0 {
                fallback = (pen, x.clone());
            }
            let gw: Vec<f64> = x
                .iter()
                .zip(src)
                .zip(&gpen)
                .zip(&w)
                .map(|(((xi, si), gp), wi)| {
                    let gx = 2.0 * (xi - si) + c * gp;
                    let th = wi.tanh();
                    gx * 0.5 * (1.0 - th * th)
                })
                .collect();
            adam.step(&mut w, &gw);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("attack iterate became non-finite".into()));
            }
        }
        rounds.push(SearchRound {
            c,
            success: round_success,
            best_l2: best.as_ref().map(|(d2, _)| d2.sqrt()),
        });
        if round_success {
            hi = Some(c);
            c = 0.5 * (lo + c);
        } else {
            lo = c;
            c = match hi {
                Some(h) => 0.5 * (lo + h),
                None => c * 10.0,
            };
        }
    }

    let adv = best.map(|(_, x)| x).unwrap_or(fallback.1);
    finish(adv, rounds)
}

pub fn craft(net: &Network, s: &Tensor, target: usize, cfg: &AttackConfig) -> Result<AdversarialExample> {
    craft_traced(net, s, target, cfg).map(|o| o.example)
}

/// Indices of the `k` successful examples with the smallest perturbation
/// (ties broken by position).
pub fn select_smallest(examples: &[AdversarialExample], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("superimposition needs k >= 1".into()));
    }
    let mut pool: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].success_on_crafted)
        .collect();
    if pool.len() < k {
        return Err(Error::InsufficientExamples {
            needed: k,
            found: pool.len(),
        });
    }
    pool.sort_by(|&a, &b| {
        examples[a]
            .perturbation
            .total_cmp(&examples[b].perturbation)
            .then(a.cmp(&b))
    });
    pool.truncate(k);
    Ok(pool)
}

/// `s + Σ δ_i` over the chosen examples, before clipping.
pub fn superimpose_unclipped(examples: &[AdversarialExample], chosen: &[usize]) -> Result<Vec<f64>> {
    let first = examples
        .first()
        .ok_or(Error::InsufficientExamples { needed: 1, found: 0 })?;
    for e in examples {
        if e.original != first.original || e.target != first.target {
            return Err(Error::Consistency(
                "superimposed examples must share the original input and target".into(),
            ));
        }
    }
    let mut out = first.original.data().to_vec();
    for &i in chosen {
        for (o, d) in out.iter_mut().zip(examples[i].delta.data()) {
            *o += d;
        }
    }
    Ok(out)
}

/// Greedy superimposition: add the deltas of the `k` smallest-perturbation
/// successful examples to the shared original and clip into the unit box.
pub fn superimpose(examples: &[AdversarialExample], k: usize) -> Result<Tensor> {
    let chosen = select_smallest(examples, k)?;
    let raw = superimpose_unclipped(examples, &chosen)?;
    let shape = examples[0].original.shape().to_vec();
    Tensor::new(shape, raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// A clean input to attack, with every target to try.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub index: usize,
    pub input: Tensor,
    pub label: usize,
    pub targets: Vec<usize>,
}

impl SweepSample {
    /// Every label except the true one.
    pub fn all_targets(index: usize, input: Tensor, label: usize, label_count: usize) -> Self {
        SweepSample {
            index,
            input,
            label,
            targets: (0..label_count).filter(|&t| t != label).collect(),
        }
    }
}

/// Craft `A(F^l, s, t)` for every sample, target and member, in that nesting
/// order. Each triple gets its own seed, so the output does not depend on
/// thread scheduling.
pub fn single_network_sweep(
    ens: &Ensemble<Network>,
    samples: &[SweepSample],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample>> {
    let triples: Vec<(usize, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.targets
                .iter()
                .flat_map(move |&t| (0..ens.len()).map(move |l| (si, t, l)))
        })
        .collect();
    triples
        .par_iter()
        .enumerate()
        .map(|(i, &(si, t, l))| {
            let sample = &samples[si];
            let triple_cfg = AttackConfig {
                seed: rng::derive_seed(cfg.seed, "sweep", i as u64),
                ..*cfg
            };
            let mut ex = craft(&ens.members()[l], &sample.input, t, &triple_cfg)?;
            ex.source_index = sample.index;
            ex.true_label = sample.label;
            ex.crafted_on = l;
            Ok(ex)
        })
        .collect()
}

/// Delta encoding on disk: sparse `(index, value)` pairs when at most 10% of
/// the coordinates are nonzero, dense otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaRecord {
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

impl DeltaRecord {
    pub fn encode(delta: &[f64]) -> Self {
        let nonzero = delta.iter().filter(|v| **v != 0.0).count();
        if nonzero * 10 <= delta.len() {
            DeltaRecord::Sparse(
                delta
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, v)| (i, *v))
                    .collect(),
            )
        } else {
            DeltaRecord::Dense(delta.to_vec())
        }
    }

    pub fn decode(&self, len: usize) -> Result<Vec<f64>> {
        match self {
            DeltaRecord::Dense(v) if v.len() == len => Ok(v.clone()),
            DeltaRecord::Dense(v) => Err(Error::Format(format!(
                "dense delta has {} entries, expected {len}",
                v.len()
            ))),
            DeltaRecord::Sparse(pairs) => {
                let mut out = vec![0.0; len];
                for &(i, v) in pairs {
                    *out.get_mut(i)
                        .ok_or_else(|| Error::Format(format!("sparse delta index {i} out of range")))? = v;
                }
                Ok(out)
            }
        }
    }
}

/// One line of an adversarial-examples JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub source_index: usize,
    pub true_label: usize,
    pub target: usize,
    pub crafted_on: usize,
    pub perturbation: f64,
    pub success_on_crafted: bool,
    pub shape: Vec<usize>,
    pub original: Vec<f64>,
    pub delta: DeltaRecord,
}

impl From<&AdversarialExample> for ExampleRecord {
    fn from(e: &AdversarialExample) -> Self {
        ExampleRecord {
            source_index: e.source_index,
            true_label: e.true_label,
            target: e.target,
            crafted_on: e.crafted_on,
            perturbation: e.perturbation,
            success_on_crafted: e.success_on_crafted,
            shape: e.original.shape().to_vec(),
            original: e.original.data().to_vec(),
            delta: DeltaRecord::encode(e.delta.data()),
        }
    }
}

impl ExampleRecord {
    /// Rebuild the example; the adversarial input is `clip(s + δ)`.
    pub fn into_example(self) -> Result<AdversarialExample> {
        let original = Tensor::new(self.shape.clone(), self.original)?;
        let delta = Tensor::new(self.shape.clone(), self.delta.decode(original.len())?)?;
        let adversarial = original.add(&delta)?.clipped_unit();
        Ok(AdversarialExample {
            source_index: self.source_index,
            true_label: self.true_label,
            original,
            adversarial,
            delta,
            target: self.target,
            crafted_on: self.crafted_on,
            perturbation: self.perturbation,
            success_on_crafted: self.success_on_crafted,
        })
    }
}

pub fn write_examples<W: Write>(mut out: W, examples: &[AdversarialExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, &ExampleRecord::from(e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(input: R) -> Result<Vec<AdversarialExample>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let rec: ExampleRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Format(format!("example record: {e}")))?;
            rec.into_example()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerParams, LayerSpec};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    /// Two-class linear net on 2-D inputs: z = W x + b.
    fn linear2(w: [f64; 4], b: [f64; 2]) -> Network {
        Network::from_parts(
            &[2],
            vec![LayerParams::new(LayerSpec::Dense { in_dim: 2, out_dim: 2 }, w.to_vec(), b.to_vec())],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let s = t(&[3.0, 4.0]);
        assert_eq!(perturbation(&s, &s).unwrap(), 0.0);
        assert_eq!(perturbation(&t(&[3.0, 9.0]), &s).unwrap(), 1.0);
        let d = t(&[0.5, -0.25]);
        let one = perturbation(&s.add(&d).unwrap(), &s).unwrap();
        let two = perturbation(&s.add(&t(&[1.0, -0.5])).unwrap(), &s).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-15);
        assert!(matches!(perturbation(&s, &t(&[0.0, 0.0])), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_penalty(&t(&[1., 2., 3.]), 2, 0.0), 0.0);
        assert_eq!(margin_penalty(&t(&[3., 1.]), 1, 0.0), 2.0);
        assert_eq!(margin_penalty(&t(&[1., 5.]), 1, 0.5), -0.5);
    }

    proptest! {
        #[test]
        fn margin_sign_matches_argmax(z in proptest::collection::vec(-5.0f64..5.0, 2..8), t_raw in 0usize..8) {
            let target = t_raw % z.len();
            let mut sorted = z.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            let pen = margin_penalty(&Tensor::vector(z.clone()).unwrap(), target, 0.0);
            prop_assert_eq!(pen <= 0.0, argmax(&z) == target);
        }
    }

    #[test]
    fn target_already_predicted_is_free() {
        let net = linear2([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let s = t(&[0.2, 0.7]);
        let ex = craft(&net, &s, 1, &AttackConfig::default()).unwrap();
        assert_eq!(ex.adversarial, s);
        assert_eq!(ex.perturbation, 0.0);
        assert!(ex.success_on_crafted);
    }

    /// Smallest successful L² distortion along a dense grid of directions
    /// and radii.
    fn grid_oracle(net: &Network, s: &[f64], target: usize) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3600 {
            let theta = a as f64 * std::f64::consts::TAU / 3600.0;
            let (dx, dy) = (theta.cos(), theta.sin());
            for r in 1..=2000 {
                let r = r as f64 * 0.0005;
                let p = [s[0] + r * dx, s[1] + r * dy];
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    break;
                }
                if net.predict_raw(&p) == target {
                    best = best.min(r);
                    break;
                }
            }
        }
        best
    }

    #[test]
    fn matches_grid_search_on_linear_toy() {
        // boundary x0 - x1 = 0.1
        let net = linear2([1.0, -1.0, -1.0, 1.0], [0.0, 0.2]);
        let s = [0.7, 0.3];
        let oracle = grid_oracle(&net, &s, 1);
        assert!(oracle.is_finite());
        let cfg = AttackConfig { iterations: 300, c_search_steps: 10, step_size: 0.01, ..AttackConfig::default() };
        let ex = craft(&net, &t(&s), 1, &cfg).unwrap();
        assert!(ex.success_on_crafted);
        let got = ex.l2_distortion();
        assert!(got <= 1.1 * oracle && got >= oracle - 1e-3, "crafted {got} vs oracle {oracle}");
    }

    #[test]
    fn loss_penalty_also_succeeds() {
        let net = linear2([1.0, -1.0, -1.0, 1.0], [0.0, 0.2]);
        let cfg = AttackConfig { penalty_kind: PenaltyKind::Loss, ..AttackConfig::default() };
        let ex = craft(&net, &t(&[0.7, 0.3]), 1, &cfg).unwrap();
        assert!(ex.success_on_crafted);
        assert!(ex.adversarial.in_unit_box());
    }

    #[test]
    fn search_keeps_best_and_is_deterministic() {
        let net = linear2([1.0, -1.0, -1.0, 1.0], [0.0, 0.2]);
        let cfg = AttackConfig { seed: 3, ..AttackConfig::default() };
        let a = craft_traced(&net, &t(&[0.8, 0.2]), 1, &cfg).unwrap();
        let b = craft_traced(&net, &t(&[0.8, 0.2]), 1, &cfg).unwrap();
        assert_eq!(a.example, b.example);
        assert_eq!(a.rounds.len(), cfg.c_search_steps);
        assert!(a.rounds[0].c == cfg.c_init);
        let mut prev = f64::INFINITY;
        for r in &a.rounds {
            if let Some(d) = r.best_l2 {
                assert!(d <= prev);
                prev = d;
            }
        }
        let recorded = a.rounds.last().unwrap().best_l2.unwrap();
        assert!((a.example.l2_distortion() - recorded).abs() < 1e-12);
    }

    #[test]
    fn impossible_target_reports_failure() {
        // class 1 can never win: its logit is always 1 below class 0
        let net = linear2([0.0, 0.0, 0.0, 0.0], [1.0, 0.0]);
        let cfg = AttackConfig { iterations: 20, c_search_steps: 3, ..AttackConfig::default() };
        let ex = craft(&net, &t(&[0.5, 0.5]), 1, &cfg).unwrap();
        assert!(!ex.success_on_crafted);
        assert!(ex.adversarial.in_unit_box());
    }

    #[test]
    fn noisy_surface_is_reproducible_and_boxed() {
        let net = linear2([1.0, -1.0, -1.0, 1.0], [0.0, 0.2]);
        let cfg = AttackConfig {
            attack_surface: AttackSurface::NoisyLogits { sigma: 0.3 },
            seed: 8,
            ..AttackConfig::default()
        };
        let a = craft(&net, &t(&[0.7, 0.3]), 1, &cfg).unwrap();
        let b = craft(&net, &t(&[0.7, 0.3]), 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.adversarial.in_unit_box());
    }

    fn example(delta: Vec<f64>, p: f64, success: bool) -> AdversarialExample {
        let original = t(&[0.5, 0.5, 0.5, 0.5]);
        let delta = Tensor::vector(delta).unwrap();
        AdversarialExample {
            source_index: 0,
            true_label: 0,
            adversarial: original.add(&delta).unwrap().clipped_unit(),
            original,
            delta,
            target: 1,
            crafted_on: 0,
            perturbation: p,
            success_on_crafted: success,
        }
    }

    #[test]
    fn superimpose_examples() {
        let zeros = vec![example(vec![0.0; 4], 0.0, true); 3];
        assert_eq!(superimpose(&zeros, 2).unwrap(), zeros[0].original);

        let pair = vec![
            example(vec![0.1, 0.0, 0.0, 0.0], 0.1, true),
            example(vec![0.0, 0.0, -0.2, 0.0], 0.2, true),
        ];
        let out = superimpose(&pair, 2).unwrap();
        assert_eq!(out.data(), &[0.6, 0.5, 0.3, 0.5]);

        let four: Vec<_> = [0.05, 0.12, 0.03, 0.40]
            .iter()
            .map(|&p| example(vec![0.0; 4], p, true))
            .collect();
        assert_eq!(select_smallest(&four, 2).unwrap(), vec![2, 0]);

        let failed = vec![example(vec![0.0; 4], 0.01, false), example(vec![0.0; 4], 0.2, true)];
        assert!(matches!(
            superimpose(&failed, 2),
            Err(Error::InsufficientExamples { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn superimposition_clips_but_sums_first() {
        let big = vec![
            example(vec![0.4, 0.0, 0.0, 0.0], 0.1, true),
            example(vec![0.3, 0.0, 0.0, -0.1], 0.2, true),
            example(vec![0.0, 0.2, 0.0, 0.0], 0.3, true),
        ];
        let chosen = select_smallest(&big, 3).unwrap();
        let raw = superimpose_unclipped(&big, &chosen).unwrap();
        assert_eq!(raw, vec![0.5 + 0.4 + 0.3, 0.7, 0.5, 0.4]);
        let out = superimpose(&big, 3).unwrap();
        assert_eq!(out.data(), &[1.0, 0.7, 0.5, 0.4]);
    }

    #[test]
    fn sweep_grid_size_and_box() {
        let specs = [LayerSpec::Dense { in_dim: 4, out_dim: 3 }];
        let ens = Ensemble::new(vec![
            Network::new(&[4], &specs, 10.0, 1).unwrap(),
            Network::new(&[4], &specs, 20.0, 2).unwrap(),
        ])
        .unwrap();
        let sample = SweepSample::all_targets(5, t(&[0.2, 0.4, 0.6, 0.8]), 0, 3);
        let cfg = AttackConfig { iterations: 30, c_search_steps: 3, ..AttackConfig::default() };
        let out = single_network_sweep(&ens, &[sample], &cfg).unwrap();
        assert_eq!(out.len(), 4);
        let tags: Vec<(usize, usize)> = out.iter().map(|e| (e.target, e.crafted_on)).collect();
        assert_eq!(tags, vec![(1, 0), (1, 1), (2, 0), (2, 1)]);
        assert!(out.iter().all(|e| e.adversarial.in_unit_box() && e.source_index == 5));
        // paper-scale grid: 9 targets x 50 members x 15 samples
        assert_eq!(9 * 50 * 15, 6750);
    }

    #[test]
    fn jsonl_round_trip_and_encoding_choice() {
        let mut sparse_delta = vec![0.0; 40];
        sparse_delta[3] = 0.25;
        let dense = example(vec![0.1, -0.1, 0.05, 0.0], 0.2, true);
        let mut sparse = example(vec![0.0; 4], 0.1, false);
        sparse.original = Tensor::vector(vec![0.5; 40]).unwrap();
        sparse.delta = Tensor::vector(sparse_delta).unwrap();
        sparse.adversarial = sparse.original.add(&sparse.delta).unwrap();

        let mut buf = Vec::new();
        write_examples(&mut buf, &[dense.clone(), sparse.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("\"dense\""));
        assert!(lines[1].contains("\"sparse\":[[3,0.25]]"));
        let back = read_examples(buf.as_slice()).unwrap();
        assert_eq!(back[1], sparse);
        assert_eq!(back[0].delta, dense.delta);
        for (x, y) in back[0].adversarial.data().iter().zip(dense.adversarial.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
