//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use swansched::nn::{self, HiddenActivation, NetSpec, OutputActivation, ParamVector};

pub const FD_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Small random network with a batch of inputs kept away from ReLU kinks
/// and a random linear read-out of its outputs.
pub struct NetCase {
    pub spec: NetSpec,
    pub params: ParamVector,
    pub input: Array2<f64>,
    pub readout: Array2<f64>,
}

impl NetCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n_sizes = rng.gen_range(2..=4);
        let layer_sizes: Vec<usize> = (0..n_sizes).map(|_| rng.gen_range(1..=8)).collect();
        let output_activation =
            if rng.gen_bool(0.5) { OutputActivation::Softmax } else { OutputActivation::Linear };
        let spec = NetSpec { layer_sizes, hidden_activation: HiddenActivation::Relu, output_activation };
        let params = ParamVector((0..spec.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let batch = rng.gen_range(1..=4);
        let out_len = spec.output_len();
        loop {
            let input = Array2::from_shape_fn((batch, spec.input_len()), |_| rng.gen_range(-2.0..2.0));
            if min_abs_preactivation(&spec, &params, &input) > 1e-3 {
                let readout = Array2::from_shape_fn((batch, out_len), |_| rng.gen_range(-1.0..1.0));
                return Self { spec, params, input, readout };
            }
        }
    }

    /// `Σ readout ⊙ net(input)`.
    pub fn objective(&self, params: &ParamVector, input: &Array2<f64>) -> f64 {
        let out = reference_forward(&self.spec, params, input);
        (&out * &self.readout).sum()
    }
}

/// Plain nested-loop forward pass, written independently of the library.
pub fn reference_forward(spec: &NetSpec, params: &ParamVector, input: &Array2<f64>) -> Array2<f64> {
    reference_preactivations(spec, params, input).1
}

fn reference_preactivations(
    spec: &NetSpec,
    params: &ParamVector,
    input: &Array2<f64>,
) -> (Vec<f64>, Array2<f64>) {
    let mut hidden_pre = Vec::new();
    let mut act = input.clone();
    let mut offset = 0;
    let n_layers = spec.layer_sizes.len() - 1;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = &params.0[offset..offset + fan_in * fan_out];
        let b = &params.0[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut next = Array2::zeros((act.nrows(), fan_out));
        for r in 0..act.nrows() {
            for o in 0..fan_out {
                let mut z = b[o];
                for i in 0..fan_in {
                    z += w[o * fan_in + i] * act[[r, i]];
                }
                next[[r, o]] = z;
            }
        }
        if l + 1 < n_layers {
            hidden_pre.extend(next.iter().copied());
            next.mapv_inplace(|z| z.max(0.0));
        } else if spec.output_activation == OutputActivation::Softmax {
            for mut row in next.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - m).exp());
                let s = row.sum();
                row.mapv_inplace(|z| z / s);
            }
        }
        act = next;
    }
    (hidden_pre, act)
}

fn min_abs_preactivation(spec: &NetSpec, params: &ParamVector, input: &Array2<f64>) -> f64 {
    let (pre, _) = reference_preactivations(spec, params, input);
    pre.iter().fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// Largest relative error of the library's parameter and input gradients
/// against central differences of the reference forward pass.
pub fn net_gradient_error(case: &NetCase) -> (f64, f64) {
    let tape = nn::forward(&case.spec, &case.params, case.input.view()).unwrap();
    let (pg, ig) = nn::backward(&case.spec, &case.params, &tape, case.readout.view()).unwrap();
    let floor = 1e-6;

    let mut worst_param: f64 = 0.0;
    for k in 0..case.params.len() {
        let mut p = case.params.clone();
        let numeric = central_diff(
            &mut |x| {
                p.0[k] = x;
                case.objective(&p, &case.input)
            },
            case.params.0[k],
        );
        worst_param = worst_param.max(rel_err(pg.0[k], numeric, floor));
    }
    let mut worst_input: f64 = 0.0;
    for idx in ndarray::indices(case.input.dim()) {
        let mut x = case.input.clone();
        let numeric = central_diff(
            &mut |v| {
                x[idx] = v;
                case.objective(&case.params, &x)
            },
            case.input[idx],
        );
        worst_input = worst_input.max(rel_err(ig[idx], numeric, floor));
    }
    (worst_param, worst_input)
}

/// Largest relative error between the EWC gradient term and central
/// differences of the penalty, over random anchors and weights.
pub fn ewc_penalty_error(seed: u64) -> f64 {
    let mut rng = swansched::seeding::rng(seed);
    let mut worst: f64 = 0.0;
    for weight in [1.0, 1e3, 1e5, 1e7] {
        let n = 60;
        let anchor = ParamVector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let fisher: Vec<f64> =
            (0..n).map(|i| if i % 7 == 0 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
        let ewc = swansched::continual::EwcAnchor::new(anchor, fisher, weight).unwrap();
        let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grad = vec![0.0; n];
        swansched::continual::ewc_transform(&ewc, &params, &mut grad).unwrap();
        for k in 0..n {
            let mut p = params.clone();
            let numeric = central_diff(
                &mut |x| {
                    p[k] = x;
                    ewc.penalty(&p)
                },
                params[k],
            );
            worst = worst.max(rel_err(grad[k], numeric, 1e-12));
        }
    }
    worst
}

pub mod gem_oracle {
    use swansched::continual::gem_project;
    use swansched::nn::GradientVector;

    /// Minimum of `‖g̃ − g_curr‖²` over `g̃ = g_prio·v + g_curr`, `v ≥ 0`,
    /// `⟨g_prio, g̃⟩ ≥ 0`, by repeated grid refinement (no closed form used).
    /// Returns `(v, objective)`.
    pub fn grid_minimum(p: &[f64], c: &[f64]) -> (f64, f64) {
        let candidate = |v: f64| -> Vec<f64> { p.iter().zip(c).map(|(pi, ci)| pi * v + ci).collect() };
        let feasible = |v: f64| -> bool {
            let g = candidate(v);
            p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0
        };
        let objective = |v: f64| -> f64 {
            candidate(v).iter().zip(c).map(|(g, ci)| (g - ci) * (g - ci)).sum()
        };
        if p.iter().all(|x| *x == 0.0) {
            return (0.0, 0.0);
        }
        let mut hi = 1.0;
        while !feasible(hi) {
            hi *= 2.0;
        }
        let (mut lo, steps) = (0.0, 1000usize);
        let mut best = (hi, objective(hi));
        for _ in 0..12 {
            let width = hi - lo;
            let mut first_feasible = None;
            for i in 0..=steps {
                let v = lo + width * i as f64 / steps as f64;
                if feasible(v) {
                    let f = objective(v);
                    if f < best.1 || (f == best.1 && v < best.0) {
                        best = (v, f);
                    }
                    first_feasible.get_or_insert(i);
                }
            }
            match first_feasible {
                Some(0) | None => break,
                Some(i) => {
                    let new_lo = lo + width * (i - 1) as f64 / steps as f64;
                    hi = lo + width * i as f64 / steps as f64;
                    lo = new_lo;
                }
            }
        }
        best
    }

    /// Checks one pair against the closed form and the grid oracle; returns a
    /// description of the first violated property.
    pub fn check_pair(p: &[f64], c: &[f64]) -> Result<(), String> {
        let r = gem_project(&GradientVector(p.to_vec()), &GradientVector(c.to_vec())).map_err(|e| e.to_string())?;
        let inner: f64 = p.iter().zip(r.projected_grad.iter()).map(|(a, b)| a * b).sum();
        if inner < -1e-9 {
            return Err(format!("infeasible: <p, g~> = {inner}"));
        }
        let norm_sq: f64 = p.iter().map(|x| x * x).sum();
        let pc: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
        let closed = if norm_sq < 1e-18 || pc >= 0.0 { 0.0 } else { -pc / norm_sq };
        if (r.v_opt - closed).abs() > 1e-9 * closed.max(1.0) {
            return Err(format!("v_opt {} vs closed form {closed}", r.v_opt));
        }
        let achieved: f64 = r.projected_grad.iter().zip(c).map(|(g, ci)| (g - ci) * (g - ci)).sum();
        let (_, grid) = grid_minimum(p, c);
        if (achieved - grid).abs() > 1e-6 {
            return Err(format!("objective {achieved} vs grid minimum {grid}"));
        }
        if !r.was_projected && r.projected_grad.0 != c {
            return Err("pass-through changed the gradient".into());
        }
        Ok(())
    }
}

pub mod refsim {
    //! Straightforward re-implementation of the simulation rules, replaying
    //! the same random draws in the documented order.

    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub struct RefJob {
        pub user: usize,
        pub left: u32,
        pub waited: u32,
        pub urgent: bool,
    }

    pub struct RefSim {
        pub n: usize,
        pub blocks: usize,
        pub p_job: f64,
        pub p_prio: f64,
        pub snr_db: f64,
        pub sigma: f64,
        pub max_size: u32,
        pub d_max: u32,
        pub w: (f64, f64, f64),
        pub rng: ChaCha8Rng,
        /// Jobs in arrival order.
        pub jobs: Vec<RefJob>,
        pub gain: Vec<f64>,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct RefOutcome {
        pub grants: Vec<u32>,
        pub rate: f64,
        pub timeouts: u32,
        pub prio_timeouts: u32,
        pub reward: f64,
        pub event: bool,
    }

    impl RefSim {
        pub fn new(cfg: &swansched::env::SimConfig, seed: u64) -> Self {
            let mut s = Self {
                n: cfg.num_users,
                blocks: cfg.num_resources,
                p_job: cfg.p_job,
                p_prio: cfg.p_prio,
                snr_db: cfg.snr_db,
                sigma: cfg.rayleigh_scale,
                max_size: cfg.max_job_size,
                d_max: cfg.max_delay,
                w: (cfg.weight_sumrate, cfg.weight_timeout, cfg.weight_prio),
                rng: ChaCha8Rng::seed_from_u64(seed),
                jobs: Vec::new(),
                gain: Vec::new(),
            };
            s.gain = (0..s.n).map(|_| s.channel()).collect();
            s
        }

        fn channel(&mut self) -> f64 {
            // a Rayleigh(σ) amplitude squared is exponential with mean 2σ²;
            // invert its CDF 1 − exp(−x / 2σ²)
            let u: f64 = self.rng.gen();
            let mean = 2.0 * self.sigma * self.sigma;
            -mean * (1.0 - u).ln()
        }

        /// Arrivals, promotion and channel for a new step; reports whether a
        /// job was promoted.
        pub fn arrive(&mut self) -> bool {
            for user in 0..self.n {
                let coin: f64 = self.rng.gen();
                if coin < self.p_job {
                    let left = self.rng.gen_range(1..=self.max_size);
                    self.jobs.push(RefJob { user, left, waited: 0, urgent: false });
                }
            }
            let coin: f64 = self.rng.gen();
            let mut event = false;
            if coin < self.p_prio && !self.jobs.is_empty() && self.jobs.iter().all(|j| !j.urgent) {
                let k = self.rng.gen_range(0..self.jobs.len());
                self.jobs[k].urgent = true;
                event = true;
            }
            for u in 0..self.n {
                self.gain[u] = self.channel();
            }
            event
        }

        pub fn features(&self) -> Vec<f64> {
            let mut out = Vec::new();
            for u in 0..self.n {
                let mine: Vec<&RefJob> = self.jobs.iter().filter(|j| j.user == u).collect();
                let total: u32 = mine.iter().map(|j| j.left).sum();
                let urgent: u32 = mine.iter().filter(|j| j.urgent).map(|j| j.left).sum();
                let oldest = mine.iter().map(|j| j.waited).max().unwrap_or(0);
                out.push(total as f64 / self.blocks as f64);
                out.push(urgent as f64 / self.blocks as f64);
                out.push(self.gain[u]);
                out.push(oldest as f64 / self.d_max as f64);
            }
            out
        }

        pub fn serve(&mut self, action: &[f64], event: bool) -> RefOutcome {
            // largest remainder, ties to the lower index
            let exact: Vec<f64> = action.iter().map(|a| a * self.blocks as f64).collect();
            let mut grants: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
            let mut spare = self.blocks - grants.iter().sum::<u32>() as usize;
            let mut taken = vec![false; self.n];
            while spare > 0 {
                let mut pick: Option<usize> = None;
                for u in 0..self.n {
                    if taken[u] {
                        continue;
                    }
                    let frac = exact[u] - exact[u].floor();
                    let better = match pick {
                        None => true,
                        Some(b) => frac > exact[b] - exact[b].floor(),
                    };
                    if better {
                        pick = Some(u);
                    }
                }
                let u = pick.expect("more spare blocks than users");
                taken[u] = true;
                grants[u] += 1;
                spare -= 1;
            }
            for u in 0..self.n {
                let need: u32 = self.jobs.iter().filter(|j| j.user == u).map(|j| j.left).sum();
                grants[u] = grants[u].min(need);
            }
            for u in 0..self.n {
                let mut budget = grants[u];
                for j in self.jobs.iter_mut().filter(|j| j.user == u) {
                    let used = budget.min(j.left);
                    j.left -= used;
                    budget -= used;
                }
            }
            let snr = 10f64.powf(self.snr_db / 10.0);
            let mut rate = 0.0;
            for u in 0..self.n {
                rate += grants[u] as f64 * (1.0 + self.gain[u] * snr).ln();
            }
            let mut timeouts = 0;
            let mut prio_timeouts = 0;
            let mut kept = Vec::new();
            for mut j in std::mem::take(&mut self.jobs) {
                if j.left == 0 {
                    continue;
                }
                if j.urgent {
                    prio_timeouts += 1;
                    continue;
                }
                j.waited += 1;
                if j.waited > self.d_max {
                    timeouts += 1;
                    continue;
                }
                kept.push(j);
            }
            self.jobs = kept;
            let reward = self.w.0 * rate + self.w.1 * timeouts as f64 + self.w.2 * prio_timeouts as f64;
            RefOutcome { grants, rate, timeouts, prio_timeouts, reward, event }
        }
    }

    /// Drives the library environment and the reference side by side and
    /// returns the first mismatch, if any.
    pub fn compare(
        cfg: &swansched::env::SimConfig,
        seed: u64,
        steps: usize,
        action_rng: &mut ChaCha8Rng,
        random_actions: bool,
    ) -> Result<(), String> {
        use swansched::env::Environment;
        let mut env = Environment::reset(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let mut reference = RefSim::new(cfg, seed);
        let n = cfg.num_users;
        for t in 0..steps {
            let arrivals = env.begin_step();
            let event = reference.arrive();
            if arrivals.priority_event != event {
                return Err(format!("step {t}: priority event {} vs {event}", arrivals.priority_event));
            }
            if env.state_vector() != reference.features() {
                return Err(format!("step {t}: state {:?} vs {:?}", env.state_vector(), reference.features()));
            }
            let action: Vec<f64> = if random_actions {
                let e: Vec<f64> = (0..n).map(|_| -(1.0 - action_rng.gen::<f64>()).ln()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            } else {
                vec![1.0 / n as f64; n]
            };
            let out = env.apply_allocation(&action).map_err(|e| e.to_string())?;
            let want = reference.serve(&action, event);
            let got = RefOutcome {
                grants: out.scheduled_per_user.clone(),
                rate: out.sum_rate,
                timeouts: out.n_timeouts,
                prio_timeouts: out.n_prio_timeouts,
                reward: out.reward,
                event,
            };
            if got != want {
                return Err(format!("step {t}: outcome {got:?} vs reference {want:?}"));
            }
            let jobs: Vec<RefJob> = env
                .state()
                .jobs
                .iter()
                .map(|j| RefJob { user: j.user, left: j.remaining, waited: j.delay, urgent: j.is_priority })
                .collect();
            if jobs != reference.jobs {
                return Err(format!("step {t}: jobs {jobs:?} vs reference {:?}", reference.jobs));
            }
            if out.next_state_vector != reference.features() {
                return Err(format!("step {t}: next state differs"));
            }
        }
        Ok(())
    }
}

pub mod determinism {
    use std::path::Path;

    use swansched::config::RunConfig;
    use swansched::harness::{self, SafetyAudit, VariantKind, CHECKPOINT_DIR, EVAL_METRICS, TRAIN_METRICS};

    /// Small but complete configuration: every variant kind trains in well
    /// under a second.
    pub fn quick_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.agent.hidden_layers = vec![16, 16];
        cfg.agent.batch_size = 8;
        cfg.agent.buffer_capacity = 500;
        cfg.train.episodes = 2;
        cfg.train.steps_per_episode = 150;
        cfg.train.fisher_batches = 4;
        cfg.train.stage1_memory_capacity = 100;
        cfg.eval.episodes = 2;
        cfg.eval.steps_per_episode = 300;
        cfg.eval.p_prio = 0.05;
        cfg.variants.gem_memory_sizes = vec![32];
        cfg.variants.ewc_weights = vec![1e3];
        cfg.variants.forget_gem_memory_size = 32;
        cfg.variants.forget_ewc_weight = 1e3;
        cfg
    }

    fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for name in [TRAIN_METRICS, EVAL_METRICS] {
            out.push((name.to_string(), std::fs::read(dir.join(name)).unwrap_or_default()));
        }
        let mut ckpt: Vec<_> = std::fs::read_dir(dir.join(CHECKPOINT_DIR))
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).collect())
            .unwrap_or_default();
        ckpt.sort();
        for p in ckpt {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, std::fs::read(&p).unwrap()));
        }
        out
    }

    /// Trains and evaluates every variant kind (continuations included) twice
    /// in separate directories and compares metrics logs and checkpoints
    /// byte for byte. Returns the number of runs compared and the merged
    /// safety audit.
    pub fn repeat_and_compare(cfg: &RunConfig, seeds: &[u64], root: &Path) -> Result<(usize, SafetyAudit), String> {
        let plan = harness::ProtocolPlan { seeds: seeds.to_vec(), ..harness::ProtocolPlan::full(cfg) };
        let (a, b) = (root.join("a"), root.join("b"));
        let mut audit = SafetyAudit::default();
        for dir in [&a, &b] {
            let out = harness::run_protocol(cfg, &plan, dir, &|_| {}).map_err(|e| e.to_string())?;
            for (train, eval) in &out {
                audit.merge(&train.audit);
                audit.merge(&eval.audit);
            }
        }
        let mut compared = 0;
        for &seed in seeds {
            let names = plan
                .variants
                .iter()
                .map(|k| k.to_string())
                .chain(plan.continuations.iter().map(|k| VariantKind::Continuation(Box::new(k.clone())).to_string()));
            for name in names {
                let (da, db) = (harness::run_dir(&a, &name, seed), harness::run_dir(&b, &name, seed));
                let (fa, fb) = (all_files(&da), all_files(&db));
                if fa.len() < 3 || fa.iter().zip(&fb).any(|(x, y)| x.1 != y.1) || fa.len() != fb.len() {
                    return Err(format!("{name} seed {seed}: repeated run differs"));
                }
                compared += 1;
            }
        }
        Ok((compared, audit))
    }
}
