//! Evolutionary subnet search under resource constraints, plus an exhaustive
//! baseline for small spaces.
//!
//! Fitness is validation cross-entropy of a candidate architecture running on
//! the shared weights (with expert terms routed once per candidate when a
//! mixture model is attached). Evaluations are memoized by canonical subnet
//! text, and the final ranking is the argmin over everything ever evaluated,
//! not just the last generation.

use crate::data::Dataset;
use crate::mole::{ExpertBank, MolePath};
use crate::router::Router;
use crate::space::{
    count_flops, count_params, count_subnets, enumerate_subnets, sample_subnet, Grouping,
    SearchSpace, SubnetConfig,
};
use crate::train::{evaluate, evaluate_mole, TrainError};
use crate::vit::SupernetWeights;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("no constraint-satisfying subnet found in {0} tries")]
    ConstraintsUnsatisfiable(usize),
    #[error("space has {0} subnets, exceeding the exhaustive cap {1}")]
    SpaceTooLarge(u128, usize),
    #[error("population must be positive")]
    EmptyPopulation,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Optional resource ceilings a candidate must respect.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ResourceConstraints {
    pub max_params: Option<u64>,
    pub max_flops: Option<u64>,
}

impl ResourceConstraints {
    pub fn admits(&self, subnet: &SubnetConfig, space: &SearchSpace) -> bool {
        if let Some(cap) = self.max_params {
            if count_params(subnet, space) > cap {
                return false;
            }
        }
        if let Some(cap) = self.max_flops {
            if count_flops(subnet, space, space.image_size) > cap {
                return false;
            }
        }
        true
    }
}

/// Evolutionary search hyperparameters.
#[derive(Debug, Clone, Serialize)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub top_k: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub constraints: ResourceConstraints,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 50,
            generations: 20,
            top_k: 10,
            mutation_prob: 0.2,
            crossover_prob: 0.4,
            constraints: ResourceConstraints::default(),
            seed: 0,
        }
    }
}

/// An evaluated architecture.
#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub subnet: SubnetConfig,
    pub val_loss: f64,
    pub params: u64,
    pub flops: u64,
}

/// One ranked row of a generation, serialized as a JSONL trace line.
#[derive(Debug, Clone, Serialize)]
pub struct SearchTraceRecord {
    pub iter: usize,
    pub rank: usize,
    pub subnet: String,
    pub val_loss: f64,
    pub params: u64,
    pub flops: u64,
}

/// Shared weights a candidate runs on; expert terms are applied when present.
pub struct ModelForEval<'a> {
    pub weights: &'a SupernetWeights,
    pub mole: Option<(&'a ExpertBank, &'a Router, &'a Grouping)>,
}

pub const EVAL_BATCH: usize = 64;

/// Mean validation cross-entropy of one architecture (f64-accumulated).
/// Routing happens once per call, never per batch.
pub fn eval_subnet(
    model: &ModelForEval<'_>,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    val: &Dataset,
) -> Result<f64, EvoError> {
    if val.is_empty() {
        return Err(EvoError::EmptyValidation);
    }
    let metrics = match model.mole {
        Some((bank, router, grouping)) => evaluate_mole(
            model.weights,
            subnet,
            space,
            bank,
            router,
            grouping,
            val,
            EVAL_BATCH,
            MolePath::Merged,
        )?,
        None => evaluate(model.weights, subnet, space, val, EVAL_BATCH)?,
    };
    Ok(metrics.loss)
}

const SAMPLE_TRIES: usize = 10_000;

fn sample_constrained<R: Rng>(
    space: &SearchSpace,
    constraints: &ResourceConstraints,
    rng: &mut R,
) -> Result<SubnetConfig, EvoError> {
    for _ in 0..SAMPLE_TRIES {
        let s = sample_subnet(space, rng);
        if constraints.admits(&s, space) {
            return Ok(s);
        }
    }
    Err(EvoError::ConstraintsUnsatisfiable(SAMPLE_TRIES))
}

/// Resample each attribute independently with probability `prob`: depth,
/// embedding width, and every block's heads and MLP ratio. A depth change
/// truncates the block list or extends it with fresh random blocks.
pub fn mutate<R: Rng>(
    subnet: &SubnetConfig,
    space: &SearchSpace,
    prob: f64,
    rng: &mut R,
) -> SubnetConfig {
    let mut out = subnet.clone();
    if rng.random_bool(prob) {
        out.depth = *space.depth_candidates.choose(rng).unwrap();
    }
    if rng.random_bool(prob) {
        out.embed = *space.embed_candidates.choose(rng).unwrap();
    }
    match out.depth.cmp(&out.blocks.len()) {
        std::cmp::Ordering::Less => out.blocks.truncate(out.depth),
        std::cmp::Ordering::Greater => {
            for _ in out.blocks.len()..out.depth {
                out.blocks.push(crate::space::BlockConfig {
                    heads: *space.head_candidates.choose(rng).unwrap(),
                    mlp: *space.mlp_candidates.choose(rng).unwrap(),
                });
            }
        }
        std::cmp::Ordering::Equal => {}
    }
    for b in &mut out.blocks {
        if rng.random_bool(prob) {
            b.heads = *space.head_candidates.choose(rng).unwrap();
        }
        if rng.random_bool(prob) {
            b.mlp = *space.mlp_candidates.choose(rng).unwrap();
        }
    }
    debug_assert!(out.validate(space).is_ok());
    out
}

/// Uniform recombination: depth and embedding width each come from a random
/// parent; block i takes its (heads, mlp) pair from a random parent when both
/// parents have a block i, otherwise from the one that does.
pub fn crossover<R: Rng>(
    a: &SubnetConfig,
    b: &SubnetConfig,
    space: &SearchSpace,
    rng: &mut R,
) -> SubnetConfig {
    let depth = if rng.random_bool(0.5) { a.depth } else { b.depth };
    let embed = if rng.random_bool(0.5) { a.embed } else { b.embed };
    let mut blocks = Vec::with_capacity(depth);
    for i in 0..depth {
        let pick = match (a.blocks.get(i), b.blocks.get(i)) {
            (Some(x), Some(y)) => {
                if rng.random_bool(0.5) {
                    *x
                } else {
                    *y
                }
            }
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!("depth comes from one of the parents"),
        };
        blocks.push(pick);
    }
    let out = SubnetConfig { depth, embed, blocks };
    debug_assert!(out.validate(space).is_ok());
    out
}

struct Memo<'f> {
    seen: HashMap<String, f64>,
    eval: &'f mut dyn FnMut(&SubnetConfig) -> Result<f64, EvoError>,
}

impl<'f> Memo<'f> {
    fn loss(&mut self, subnet: &SubnetConfig) -> Result<f64, EvoError> {
        let key = subnet.canonical_text();
        if let Some(&v) = self.seen.get(&key) {
            return Ok(v);
        }
        let v = (self.eval)(subnet)?;
        self.seen.insert(key, v);
        Ok(v)
    }
}

fn rank_candidates(
    mut list: Vec<Candidate>,
    top_k: usize,
) -> Vec<Candidate> {
    list.sort_by(|x, y| {
        x.val_loss
            .total_cmp(&y.val_loss)
            .then_with(|| x.subnet.canonical_text().cmp(&y.subnet.canonical_text()))
    });
    list.dedup_by_key(|c| c.subnet.canonical_text());
    list.truncate(top_k);
    list
}

/// Evolutionary search driven by an arbitrary fitness closure. The returned
/// list holds the `top_k` lowest-loss candidates found anywhere in the run,
/// ranked ascending with canonical text as the tie-break.
pub fn evolve_with(
    space: &SearchSpace,
    cfg: &SearchConfig,
    eval: &mut dyn FnMut(&SubnetConfig) -> Result<f64, EvoError>,
    log: &mut dyn FnMut(&SearchTraceRecord),
) -> Result<Vec<Candidate>, EvoError> {
    if cfg.population == 0 {
        return Err(EvoError::EmptyPopulation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut memo = Memo {
        seen: HashMap::new(),
        eval,
    };
    let mut population: Vec<SubnetConfig> = (0..cfg.population)
        .map(|_| sample_constrained(space, &cfg.constraints, &mut rng))
        .collect::<Result<_, _>>()?;

    // ranking always reflects everything evaluated so far, not just the
    // current generation
    let ranked_from_memo = |memo: &Memo| -> Vec<Candidate> {
        let all: Vec<Candidate> = memo
            .seen
            .iter()
            .map(|(text, &loss)| {
                let subnet = SubnetConfig::parse_text(text).expect("memo keys are canonical");
                Candidate {
                    params: count_params(&subnet, space),
                    flops: count_flops(&subnet, space, space.image_size),
                    subnet,
                    val_loss: loss,
                }
            })
            .collect();
        rank_candidates(all, cfg.top_k)
    };

    let emit = |iter: usize, ranked: &[Candidate], log: &mut dyn FnMut(&SearchTraceRecord)| {
        for (rank, c) in ranked.iter().enumerate() {
            log(&SearchTraceRecord {
                iter,
                rank,
                subnet: c.subnet.canonical_text(),
                val_loss: c.val_loss,
                params: c.params,
                flops: c.flops,
            });
        }
    };

    for s in &population {
        memo.loss(s)?;
    }
    let mut ranked = ranked_from_memo(&memo);
    emit(0, &ranked, log);

    const CHILD_TRIES: usize = 100;
    for gen in 1..=cfg.generations {
        let parents: Vec<SubnetConfig> = ranked.iter().map(|c| c.subnet.clone()).collect();
        let mut next: Vec<SubnetConfig> = parents.clone();
        let n_mut = (cfg.population as f64 * cfg.mutation_prob).ceil() as usize;
        let n_cross = (cfg.population as f64 * cfg.crossover_prob).ceil() as usize;
        for _ in 0..n_mut {
            let mut child = None;
            for _ in 0..CHILD_TRIES {
                let parent = parents.choose(&mut rng).unwrap();
                let m = mutate(parent, space, cfg.mutation_prob, &mut rng);
                if cfg.constraints.admits(&m, space) {
                    child = Some(m);
                    break;
                }
            }
            next.push(match child {
                Some(c) => c,
                None => sample_constrained(space, &cfg.constraints, &mut rng)?,
            });
        }
        for _ in 0..n_cross {
            let mut child = None;
            for _ in 0..CHILD_TRIES {
                let pa = parents.choose(&mut rng).unwrap();
                let pb = parents.choose(&mut rng).unwrap();
                let c = crossover(pa, pb, space, &mut rng);
                if cfg.constraints.admits(&c, space) {
                    child = Some(c);
                    break;
                }
            }
            next.push(match child {
                Some(c) => c,
                None => sample_constrained(space, &cfg.constraints, &mut rng)?,
            });
        }
        while next.len() < cfg.population {
            next.push(sample_constrained(space, &cfg.constraints, &mut rng)?);
        }
        next.truncate(cfg.population.max(parents.len()));
        population = next;
        for s in &population {
            memo.loss(s)?;
        }
        ranked = ranked_from_memo(&memo);
        emit(gen, &ranked, log);
    }
    Ok(ranked)
}

/// Evolutionary search with fitness = validation loss on shared weights.
pub fn evolve(
    model: &ModelForEval<'_>,
    space: &SearchSpace,
    val: &Dataset,
    cfg: &SearchConfig,
    log: &mut dyn FnMut(&SearchTraceRecord),
) -> Result<Vec<Candidate>, EvoError> {
    evolve_with(space, cfg, &mut |s| eval_subnet(model, s, space, val), log)
}

pub const BRUTE_FORCE_CAP: usize = 10_000;

/// Exhaustively rank every constraint-satisfying subnet (spaces up to
/// [`BRUTE_FORCE_CAP`] candidates). Stable order: ascending loss, canonical
/// text as tie-break.
pub fn brute_force_with(
    space: &SearchSpace,
    constraints: &ResourceConstraints,
    eval: &mut dyn FnMut(&SubnetConfig) -> Result<f64, EvoError>,
) -> Result<Vec<Candidate>, EvoError> {
    let total = count_subnets(space);
    let cap = num_bigint::BigUint::from(BRUTE_FORCE_CAP);
    if total > cap {
        let approx: u128 = total.try_into().unwrap_or(u128::MAX);
        return Err(EvoError::SpaceTooLarge(approx, BRUTE_FORCE_CAP));
    }
    let mut out = Vec::new();
    for subnet in enumerate_subnets(space) {
        if !constraints.admits(&subnet, space) {
            continue;
        }
        let loss = eval(&subnet)?;
        out.push(Candidate {
            val_loss: loss,
            params: count_params(&subnet, space),
            flops: count_flops(&subnet, space, space.image_size),
            subnet,
        });
    }
    out.sort_by(|x, y| {
        x.val_loss
            .total_cmp(&y.val_loss)
            .then_with(|| x.subnet.canonical_text().cmp(&y.subnet.canonical_text()))
    });
    Ok(out)
}

/// Exhaustive ranking with fitness = validation loss on shared weights.
pub fn brute_force(
    model: &ModelForEval<'_>,
    space: &SearchSpace,
    val: &Dataset,
    constraints: &ResourceConstraints,
) -> Result<Vec<Candidate>, EvoError> {
    brute_force_with(space, constraints, &mut |s| {
        eval_subnet(model, s, space, val)
    })
}
