#![allow(dead_code)]

pub mod oracles;
pub mod planning;

use beliefplan::nn::{Graph, ParameterStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Steps tried in turn when a central difference disagrees. A ReLU kink
/// within one step of the evaluation point spoils the larger ones only.
const FD_REFINE: [f64; 3] = [FD_STEP, 1e-6, 1e-7];

/// Relative error, absolute below magnitude `1e-3`.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval(build: &dyn Fn(&mut Graph, &ParameterStore) -> Var, store: &ParameterStore) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.value(loss).data()[0]
}

/// Largest relative error between reverse-mode gradients of every parameter
/// in `store` and central finite differences.
pub fn param_grad_error(store: &mut ParameterStore, build: &dyn Fn(&mut Graph, &ParameterStore) -> Var) -> f64 {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    store.accumulate(&g, &grads);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        for (k, &ak) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            let mut e = f64::INFINITY;
            for h in FD_REFINE {
                store.value_mut(id).data_mut()[k] = orig + h;
                let up = eval(build, store);
                store.value_mut(id).data_mut()[k] = orig - h;
                let down = eval(build, store);
                store.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                e = e.min(rel_error(ak, numeric));
                if e < 0.1 * FD_TOLERANCE {
                    break;
                }
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Same check against the entries of constant inputs.
pub fn input_grad_error(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let run = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (k, &ak) in analytic.iter().enumerate() {
            let orig = work[i].data()[k];
            let mut e = f64::INFINITY;
            for h in FD_REFINE {
                work[i].data_mut()[k] = orig + h;
                let up = run(&work);
                work[i].data_mut()[k] = orig - h;
                let down = run(&work);
                work[i].data_mut()[k] = orig;
                e = e.min(rel_error(ak, (up - down) / (2.0 * h)));
                if e < 0.1 * FD_TOLERANCE {
                    break;
                }
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Deterministic pseudo-random tensor with entries in `[-scale, scale]`.
pub fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Small dimensions so training tests run in seconds.
pub fn toy_config() -> beliefplan::config::RunConfig {
    let mut cfg = beliefplan::config::RunConfig::default();
    cfg.observation.agents = 6;
    cfg.observation.history = 5;
    cfg.observation.polylines = 12;
    cfg.observation.waypoints = 6;
    cfg.observation.tracked = 3;
    cfg.model.hidden = 8;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.model.modes = 2;
    cfg.model.future = 20;
    cfg.model.ego_steps = 5;
    cfg.model.decoder_hidden = 16;
    cfg.model.q_hidden = 16;
    cfg.planner.iterations = 20;
    cfg.planner.horizon = 40;
    cfg
}

pub fn scenario(kind: beliefplan::simulator::ScenarioKind, seed: u64) -> beliefplan::simulator::Scenario {
    beliefplan::simulator::generate_scenario(kind, seed, &beliefplan::simulator::GeneratorParams::default()).unwrap()
}
