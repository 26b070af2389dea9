//! Planner instances and the brute-force optimum shared by the planner
//! tests and the acceptance run.

use beliefplan::config::PlannerConfig;
use beliefplan::geometry::{CartesianState, ReferencePath};
use beliefplan::planner::{sequence_cost, AgentFuture, FrozenBelief, ModeFuture, OptionSet, PlanContext, Planner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ctx<'a>(path: &'a ReferencePath, belief: &'a FrozenBelief) -> PlanContext<'a> {
    PlanContext { path, belief, ego_length: 4.5, ego_width: 2.0, corridor: 3.0 }
}

pub fn random_belief(rng: &mut ChaCha8Rng, agents: usize, modes: usize) -> FrozenBelief {
    FrozenBelief {
        agents: (0..agents)
            .map(|i| {
                let mut probs: Vec<f64> = (0..modes).map(|_| rng.random_range(0.01..1.0)).collect();
                let t: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= t);
                let modes = probs
                    .into_iter()
                    .map(|prob| {
                        let (x0, y0) = (rng.random_range(10.0..60.0), rng.random_range(-15.0..15.0));
                        let h: f64 = rng.random_range(-3.1..3.1);
                        let v = rng.random_range(0.0..8.0);
                        ModeFuture {
                            prob,
                            poses: (1..=80)
                                .map(|k| {
                                    let t = k as f64 * 0.1;
                                    [x0 + v * t * h.cos(), y0 + v * t * h.sin(), h]
                                })
                                .collect(),
                        }
                    })
                    .collect();
                AgentFuture { agent_id: i as u32 + 1, length: 4.5, width: 2.0, modes }
            })
            .collect(),
    }
}

/// Lowest discounted cost over every option sequence of `depth`.
pub fn exhaustive_best(
    cfg: &PlannerConfig,
    options: &OptionSet,
    e: &CartesianState,
    c: &PlanContext,
    depth: usize,
) -> f64 {
    let k = options.len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(depth as u32) {
        let seq: Vec<usize> = (0..depth).map(|d| code / k.pow(d as u32) % k).collect();
        if let Some(v) = sequence_cost(cfg, options, e, c, &seq) {
            best = best.min(v);
        }
    }
    best
}

/// Random deterministic instance: curved or straight route, ego state and a
/// frozen belief of up to three agents.
pub fn optimality_instance(seed: u64) -> (ReferencePath, FrozenBelief, CartesianState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bend: f64 = rng.random_range(-0.01..0.01);
    let pts: Vec<[f64; 2]> = (0..=60)
        .map(|k| {
            let s = k as f64 * 5.0;
            [s, bend * s * s / 10.0]
        })
        .collect();
    let path = ReferencePath::with_uniform_limit(pts, rng.random_range(6.0..14.0)).unwrap();
    let agents = rng.random_range(0..=3);
    let belief = random_belief(&mut rng, agents, 2);
    let e = CartesianState {
        x: 10.0,
        y: rng.random_range(-1.0..1.0),
        heading: 0.0,
        v: rng.random_range(0.0..12.0),
        a: rng.random_range(-2.0..2.0),
    };
    (path, belief, e)
}

/// Fraction of seeded depth-two instances where search finds the
/// brute-force optimum over all 121 sequences, and the largest relative gap
/// among the rest.
pub fn depth_two_optimality(iterations: usize, instances: u64) -> (usize, f64) {
    let mut cfg = PlannerConfig::default();
    cfg.horizon = 2 * cfg.option_length;
    cfg.iterations = iterations;
    let options = OptionSet::from_config(&cfg).unwrap();
    let (mut exact, mut worst) = (0, 0.0f64);
    for seed in 0..instances {
        let (path, belief, e) = optimality_instance(seed);
        let c = ctx(&path, &belief);
        let (res, _) = Planner { cfg: &cfg, options: &options }.plan(&e, &c, &[1.0 / 11.0; 11]).unwrap();
        let got = sequence_cost(&cfg, &options, &e, &c, &res.sequence).unwrap();
        let best = exhaustive_best(&cfg, &options, &e, &c, 2);
        if (got - best).abs() <= 1e-12 * best.abs().max(1.0) {
            exact += 1;
        } else {
            worst = worst.max((got - best) / best.abs());
        }
    }
    (exact, worst)
}
