//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, followed by
//! indented details. Set `NES_ACCEPTANCE_STRICT=1` to exit non-zero when any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{conv_oracle, expand_oracle, random_case, random_indices, support};
use nes::autograd::{backward_epitome, grad_check, random_probe, ProbeKind};
use nes::checkpoint;
use nes::config::{ExperimentConfig, IndexMode};
use nes::cost::{network_counts, plan_from_multiplier, ArchConfig};
use nes::epitome::{expand_weights, interp_kernel, Epitome, IndexSet, LayerPlan, Shape4, SpatialMode};
use nes::infer::{
    count_madd, infer_with, naive_forward, reuse_bound, reuse_overhead, CountMode, InferOptions, WindowStrategy,
};
use nes::model::argmax;
use nes::routing::{RoutingMap, DEFAULT_MOMENTUM};
use nes::tensor::{ConvGeometry, Padding, Rng, Tensor};
use nes::train::train;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};

// Criterion 1
const BASELINE_PARAMS: f64 = 3.4e6;
const BASELINE_PARAMS_TOL: f64 = 0.02;
const BASELINE_MADD: f64 = 301e6;
const BASELINE_MADD_TOL: f64 = 0.03;
/// (multiplier, parameter compression rate, parameters)
const PLANNED: [(f64, f64, f64); 4] = [(0.75, 1.17, 2.94e6), (0.5, 1.36, 2.52e6), (0.35, 1.54, 2.26e6), (0.18, 1.80, 1.95e6)];
const RATE_TOL: f64 = 0.03;
const PLANNED_PARAMS_TOL: f64 = 0.02;
const COST_BUDGET: Duration = Duration::from_secs(1);

// Criterion 2
const ORACLE_INSTANCES_PER_KIND: usize = 80;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);

// Criterion 3
const GRAD_CONFIGS: usize = 24;
const GRAD_EPSILON: f64 = 1e-5;
const GRAD_MIN_KINK: f64 = 1e-3;
const GRAD_TOL_EPITOME: f64 = 1e-5;
const GRAD_TOL_LEARNER: f64 = 1e-4;
const GRAD_TOL_INDICES: f64 = 1e-5;
const ADJOINT_CASES: usize = 60;
const ADJOINT_TOL: f64 = 1e-10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

// Criterion 4
const COUNT_INSTANCES: usize = 150;
const APPROX_PLANS: usize = 300;
const APPROX_MIN_AREA: usize = 64;
const APPROX_TOL: f64 = 0.10;

// Criterion 5
const PROPERTY_CASES: u32 = 1000;
const PROPERTY_BUDGET: Duration = Duration::from_secs(30);

// Criterion 6
const TOY_MIN_ACCURACY: f64 = 0.95;
const TOY_GAP_TOL: f64 = 1e-9;
const TOY_COMPRESSION: f64 = 2.0;
const TOY_BUDGET: Duration = Duration::from_secs(120);

// Criterion 7
const EMA_MOMENTUM: f64 = 0.97;
const EMA_STEPS: i32 = 300;
const EMA_TOL: f64 = 1e-12;

struct Verdict {
    passed: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict {
            passed: true,
            details: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.details.push(format!("[{}] {line}", if ok { "ok" } else { "miss" }));
    }

    fn note(&mut self, line: String) {
        self.details.push(format!("      {line}"));
    }
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    ((got - want) / want).abs() <= rel
}

fn run(n: usize, title: &str, budget: Option<Duration>, f: impl FnOnce(&mut Verdict)) -> bool {
    let t = Instant::now();
    let mut v = Verdict::new();
    f(&mut v);
    let elapsed = t.elapsed();
    if let Some(b) = budget {
        v.check(elapsed <= b, format!("runtime {:.2} s within {:.0} s", elapsed.as_secs_f64(), b.as_secs_f64()));
    }
    println!(
        "criterion {n} {title}: {} ({:.2} s)",
        if v.passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    for d in &v.details {
        println!("    {d}");
    }
    v.passed
}

fn cost_model(v: &mut Verdict) {
    let base = ArchConfig::bundled("mobilenetv2").unwrap();
    let r = network_counts(&base).unwrap();
    v.check(
        within(r.baseline_params as f64, BASELINE_PARAMS, BASELINE_PARAMS_TOL),
        format!("baseline params {} vs {BASELINE_PARAMS:.3e} +-{BASELINE_PARAMS_TOL}", r.baseline_params),
    );
    v.check(
        within(r.baseline_madd as f64, BASELINE_MADD, BASELINE_MADD_TOL),
        format!("baseline MAdd {} vs {BASELINE_MADD:.3e} +-{BASELINE_MADD_TOL}", r.baseline_madd),
    );
    for (c, rate, params) in PLANNED {
        let (cfg, _) = plan_from_multiplier(&base, c).unwrap();
        let p = network_counts(&cfg).unwrap();
        v.check(
            (p.param_rate - rate).abs() <= RATE_TOL,
            format!("c={c}: rate {:.4} vs {rate} +-{RATE_TOL}", p.param_rate),
        );
        v.check(
            within(p.params as f64, params, PLANNED_PARAMS_TOL),
            format!("c={c}: params {} vs {params:.3e} +-{PLANNED_PARAMS_TOL}", p.params),
        );
        v.note(format!(
            "c={c}: MAdd {} (rate {:.3}), ops {} / {} without the -1 term",
            p.madd, p.madd_rate, p.ops, p.ops_no_minus_one
        ));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Conv1d,
    Conv2d,
    Fc,
}

struct Instance {
    plan: LayerPlan,
    epitome: Epitome,
    indices: IndexSet,
    input: Tensor,
    extent: [usize; 2],
}

/// Epitome extents in `1..=8`, `R_cin, R_cout` in `1..=4`, random block
/// sizes, geometry, spatial mode and a mix of integer and fractional starts.
fn oracle_instance(rng: &mut Rng, kind: Kind) -> Instance {
    let ce_in = rng.int_range(1, 8);
    let ce_out = rng.int_range(1, 8);
    let (b_in, b_out) = (rng.int_range(1, ce_in), rng.int_range(1, ce_out));
    let c_in = (rng.int_range(1, 4) - 1) * b_in + rng.int_range(1, b_in);
    let c_out = (rng.int_range(1, 4) - 1) * b_out + rng.int_range(1, b_out);
    let (ew, eh, kw, kh, iw, ih) = match kind {
        Kind::Conv2d => {
            let (kw, kh) = (rng.int_range(1, 5), rng.int_range(1, 5));
            (rng.int_range(1, 8), rng.int_range(1, 8), kw, kh, rng.int_range(kw, kw + 6), rng.int_range(kh, kh + 6))
        }
        Kind::Conv1d => {
            let kw = rng.int_range(1, 7);
            (rng.int_range(1, 8), 1, kw, 1, rng.int_range(kw, kw + 12), 1)
        }
        Kind::Fc => (1, 1, 1, 1, 1, 1),
    };
    let geometry = match kind {
        Kind::Fc => ConvGeometry::default(),
        _ => common::random_geometry(rng),
    };
    let mode = if rng.uniform() < 0.5 {
        SpatialMode::PerBlock
    } else {
        SpatialMode::Shared
    };
    let plan = LayerPlan::new(Shape4::new(kw, kh, c_in, c_out), Shape4::new(ew, eh, ce_in, ce_out))
        .unwrap()
        .with_betas(b_in, b_out)
        .unwrap()
        .with_geometry(geometry)
        .with_spatial_mode(mode);
    let epitome = Epitome::random(plan.epitome, 1.0, rng).unwrap();
    let indices = random_indices(&plan, rng, true);
    let shape: Vec<usize> = match kind {
        Kind::Conv2d => vec![iw, ih, c_in],
        Kind::Conv1d => vec![iw, c_in],
        Kind::Fc => vec![c_in],
    };
    let input = Tensor::randn(&shape, 1.0, rng);
    Instance {
        plan,
        epitome,
        indices,
        input,
        extent: [iw, ih],
    }
}

fn oracle_output(inst: &Instance) -> Tensor {
    let w = expand_weights(&inst.epitome, &inst.plan, &inst.indices).unwrap();
    let x3 = inst
        .input
        .clone()
        .reshape(&[inst.extent[0], inst.extent[1], inst.plan.weight.c_in])
        .unwrap();
    conv_oracle(&x3, &w, inst.plan.geometry.stride, inst.plan.geometry.padding)
}

fn relative(got: &Tensor, want: &Tensor) -> f64 {
    let scale = want.max_abs();
    let diff = got.max_abs_diff(want).unwrap();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn oracle_equivalence(v: &mut Verdict) {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut paths = [0usize; 4];
    let mut r_seen = [[false; 4]; 2];
    let mut integer_starts = 0;
    let mut fractional_starts = 0;
    for kind in [Kind::Conv1d, Kind::Conv2d, Kind::Fc] {
        for i in 0..ORACLE_INSTANCES_PER_KIND {
            let inst = oracle_instance(&mut rng, kind);
            let map = RoutingMap::from_indices(&inst.plan, &inst.indices).unwrap().frozen();
            let (strategy, budget, path) = match i % 4 {
                0 => (WindowStrategy::Auto, 1 << 24, 0),
                1 => (WindowStrategy::Direct, 1 << 24, 1),
                2 => (WindowStrategy::Integral, 1 << 24, 2),
                _ => (WindowStrategy::Auto, 0, 3),
            };
            let opts = InferOptions {
                strategy,
                product_budget: budget,
            };
            let (got, _) = infer_with(&inst.input, &inst.epitome, &map, &inst.plan, opts).unwrap();
            let want = oracle_output(&inst);
            assert_eq!(got.len(), want.len());
            let want = want.reshape(got.shape()).unwrap();
            worst = worst.max(relative(&got, &want));
            count += 1;
            paths[path] += 1;
            r_seen[0][inst.plan.r_cin() - 1] = true;
            r_seen[1][inst.plan.r_cout() - 1] = true;
            for x in inst.indices.to_flat() {
                if x.fract() == 0.0 {
                    integer_starts += 1;
                } else {
                    fractional_starts += 1;
                }
            }
        }
    }
    v.check(count >= 200, format!("{count} instances across conv1d, conv2d and fc"));
    v.check(
        r_seen.iter().flatten().all(|&s| s),
        "every R_cin and R_cout in 1..=4 exercised".into(),
    );
    v.check(worst <= ORACLE_TOL, format!("worst relative gap {worst:.3e} <= {ORACLE_TOL:e}"));
    v.note(format!(
        "window paths auto/direct/integral/fallback: {paths:?}; starts integer {integer_starts}, fractional {fractional_starts}"
    ));
}

fn gradient_correctness(v: &mut Verdict) {
    let mut rng = Rng::new(99);
    let mut worst = [0.0f64; 3];
    let mut failures = 0;
    for i in 0..GRAD_CONFIGS {
        let kind = ProbeKind::ALL[i % 3];
        let learner = (i / 3) % 2 == 1;
        let mut probe = random_probe(&mut rng, kind, learner, GRAD_MIN_KINK).unwrap();
        let kink = probe.kink_distance().unwrap();
        assert!(kink >= GRAD_MIN_KINK);
        let second = if learner { GRAD_TOL_LEARNER } else { GRAD_TOL_INDICES };
        let r = grad_check(&mut probe, GRAD_EPSILON, &[GRAD_TOL_EPITOME, second]).unwrap();
        failures += usize::from(!r.passed());
        worst[0] = worst[0].max(r.group("epitome").unwrap().max_rel_error);
        match r.group("learner") {
            Some(g) => worst[1] = worst[1].max(g.max_rel_error),
            None => worst[2] = worst[2].max(r.group("indices").unwrap().max_rel_error),
        }
    }
    v.check(
        failures == 0,
        format!("{GRAD_CONFIGS} configurations, central differences eps={GRAD_EPSILON:e}, starts >= {GRAD_MIN_KINK:e} from kinks"),
    );
    v.check(worst[0] <= GRAD_TOL_EPITOME, format!("epitome worst {:.3e} <= {GRAD_TOL_EPITOME:e}", worst[0]));
    v.check(worst[1] <= GRAD_TOL_LEARNER, format!("learner worst {:.3e} <= {GRAD_TOL_LEARNER:e}", worst[1]));
    v.check(worst[2] <= GRAD_TOL_INDICES, format!("direct indices worst {:.3e} <= {GRAD_TOL_INDICES:e}", worst[2]));

    let mut worst_adj = 0.0f64;
    for i in 0..ADJOINT_CASES {
        let spatial = [[4, 4], [5, 0], [0, 0]][i % 3];
        let c = random_case(&mut rng, 8, spatial, true);
        let u = Tensor::randn(&c.plan.weight.as_array(), 1.0, &mut rng);
        let lhs = expand_weights(&c.epitome, &c.plan, &c.indices).unwrap().dot(&u).unwrap();
        let rhs = backward_epitome(&u, &c.plan, &c.indices).unwrap().dot(c.epitome.values()).unwrap();
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    v.check(
        worst_adj <= ADJOINT_TOL,
        format!("adjoint <expand(E), U> = <E, scatter(U)> over {ADJOINT_CASES} cases, worst {worst_adj:.3e} <= {ADJOINT_TOL:e}"),
    );
}

fn stored_formula(p: &LayerPlan) -> usize {
    let (l, e) = (p.weight, p.epitome);
    e.w * e.h * e.c_in * e.c_out + 3 * l.c_in.div_ceil(p.beta_in) + l.c_out.div_ceil(p.beta_out)
}

#[derive(Default)]
struct ApproxTally {
    plans: usize,
    within: usize,
    worst: f64,
    worst_at: String,
    bounded: usize,
    bound_violations: usize,
}

impl ApproxTally {
    /// Compares the closed-form ratio with `C_out C_in w h / (C^E_out C^E_in
    /// W^E H^E)`. Writing the ratio as `(2 - a) / (2 + b)` relative to the
    /// approximation, with `a = 1 / (C_in w h)` and `b` collecting the
    /// summation, wrapping and reuse terms, its gap is at most `(a + b) / 2`.
    fn add(&mut self, plan: &LayerPlan, extent: [usize; 2]) {
        let [ow, oh] = nes::infer::output_extent(plan, extent).unwrap();
        if ow * oh < APPROX_MIN_AREA {
            return;
        }
        let exact = count_madd(plan, extent, CountMode::Naive).unwrap() as f64
            / count_madd(plan, extent, CountMode::Reuse).unwrap() as f64;
        let (l, e) = (plan.weight, plan.epitome);
        let approx = l.numel() as f64 / e.numel() as f64;
        let gap = (exact / approx - 1.0).abs();
        let area = (e.w * e.h) as f64;
        let core = e.c_in as f64 * e.c_out as f64 * area;
        let a = 1.0 / (l.c_in * l.w * l.h) as f64;
        let b = 1.0 / e.c_in as f64 - 1.0 / (e.c_in as f64 * area)
            + 2.0 * (plan.r_cin() * plan.beta_in) as f64 / core
            + 2.0 * (plan.r_cout() * plan.beta_out) as f64 / (core * (ow * oh) as f64);
        let bound = (a + b) / 2.0;
        self.plans += 1;
        self.within += usize::from(gap <= APPROX_TOL);
        if bound <= APPROX_TOL {
            self.bounded += 1;
            self.bound_violations += usize::from(gap > APPROX_TOL || gap > bound + 1e-12);
        }
        if gap > self.worst {
            self.worst = gap;
            self.worst_at = format!("weights {:?}, epitome {:?}, output {ow}x{oh}", l.as_array(), e.as_array());
        }
    }
}

fn count_exactness(v: &mut Verdict) {
    let mut rng = Rng::new(4242);
    let kinds = [Kind::Conv1d, Kind::Conv2d, Kind::Fc];

    let mut naive_mismatch = 0;
    let mut over_bound = 0;
    for i in 0..COUNT_INSTANCES {
        let inst = oracle_instance(&mut rng, kinds[i % 3]);
        let (_, ops) = naive_forward(&inst.input, &inst.epitome, &inst.indices, &inst.plan).unwrap();
        let (iw, ih) = (inst.extent[0], inst.extent[1]);
        let [ow, oh] = nes::infer::output_extent(&inst.plan, inst.extent).unwrap();
        let l = inst.plan.weight;
        let formula = ((2 * l.c_in * l.w * l.h - 1) * ow * oh * l.c_out) as u64;
        naive_mismatch += usize::from(ops != formula || ops != count_madd(&inst.plan, [iw, ih], CountMode::Naive).unwrap());
        let map = RoutingMap::from_indices(&inst.plan, &inst.indices).unwrap().frozen();
        for strategy in [WindowStrategy::Auto, WindowStrategy::Direct, WindowStrategy::Integral] {
            let opts = InferOptions {
                strategy,
                ..InferOptions::default()
            };
            let (_, rep) = infer_with(&inst.input, &inst.epitome, &map, &inst.plan, opts).unwrap();
            over_bound += usize::from(rep.measured_madd > reuse_bound(&inst.plan, &inst.indices, inst.extent).unwrap());
        }
    }
    v.check(naive_mismatch == 0, format!("naive path counts equal the closed form on {COUNT_INSTANCES} instances"));
    v.check(over_bound == 0, format!("reuse path within its plan bound on {} runs", 3 * COUNT_INSTANCES));

    let mut over_overhead = 0;
    let mut worst_slack = 0.0f64;
    for _ in 0..COUNT_INSTANCES {
        let ce_in = rng.int_range(1, 8);
        let ce_out = rng.int_range(1, 8);
        let (b_in, b_out) = (rng.int_range(1, ce_in), rng.int_range(1, ce_out));
        let c_in = rng.int_range(1, 4 * b_in);
        let c_out = rng.int_range(1, 4 * b_out);
        let k = rng.int_range(1, 3);
        let (ew, eh) = (rng.int_range(2, 8), rng.int_range(2, 8));
        let plan = LayerPlan::new(Shape4::new(k, k, c_in, c_out), Shape4::new(ew, eh, ce_in, ce_out))
            .unwrap()
            .with_betas(b_in, b_out)
            .unwrap()
            .with_groups(1, 1)
            .unwrap()
            .with_geometry(ConvGeometry::new(1, Padding::Same))
            .with_spatial_mode(SpatialMode::Shared);
        let flat: Vec<f64> = plan.index_limits().iter().map(|&l| rng.int_range(0, l as usize - 1) as f64).collect();
        let idx = IndexSet::from_flat(&plan, &flat).unwrap();
        let e = Epitome::random(plan.epitome, 1.0, &mut rng).unwrap();
        let extent = [rng.int_range(3, 12), rng.int_range(3, 12)];
        let x = Tensor::randn(&[extent[0], extent[1], c_in], 1.0, &mut rng);
        let map = RoutingMap::from_indices(&plan, &idx).unwrap().frozen();
        let (_, rep) = infer_with(&x, &e, &map, &plan, InferOptions::default()).unwrap();
        let closed = count_madd(&plan, extent, CountMode::Reuse).unwrap();
        let overhead = reuse_overhead(&plan, extent).unwrap();
        over_overhead += usize::from(rep.measured_madd > closed + overhead);
        worst_slack = worst_slack.max(rep.measured_madd as f64 / closed as f64);
    }
    v.check(
        over_overhead == 0,
        format!("integer starts, one spatial group, stride 1: measured <= closed reuse form + 4 W H C^E_out on {COUNT_INSTANCES} plans (largest measured/closed {worst_slack:.3})"),
    );

    let base = ArchConfig::bundled("mobilenetv2").unwrap();
    let mut random = ApproxTally::default();
    let widths = [16usize, 24, 32, 64, 96, 144, 192, 320, 384, 576];
    while random.plans < APPROX_PLANS {
        let c_in = widths[rng.int_range(0, widths.len() - 1)];
        let c_out = widths[rng.int_range(0, widths.len() - 1)];
        let k = [1, 3][rng.int_range(0, 1)];
        let ce_in = ((c_in as f64 * rng.uniform_range(0.0625, 1.0)).round() as usize).clamp(1, c_in);
        let ce_out = ((c_out as f64 * rng.uniform_range(0.0625, 1.0)).round() as usize).clamp(1, c_out);
        let side = rng.int_range(8, 56);
        let plan = LayerPlan::new(Shape4::new(k, k, c_in, c_out), Shape4::new(k, k, ce_in, ce_out))
            .unwrap()
            .with_geometry(ConvGeometry::new(1, Padding::Same));
        random.add(&plan, [side, side]);
    }
    let mut planned = ApproxTally::default();
    for c in [0.75, 0.5, 0.35, 0.18] {
        let (cfg, _) = plan_from_multiplier(&base, c).unwrap();
        for layer in cfg.resolve().unwrap() {
            if let Some(plan) = layer.plan().unwrap() {
                planned.add(&plan, [layer.input[0], layer.input[1]]);
            }
        }
    }
    for (name, t) in [("random plans", &random), ("planned MobileNetV2 layers", &planned)] {
        v.check(
            t.worst <= APPROX_TOL,
            format!(
                "reduction ratio vs channel-product approximation, H W >= {APPROX_MIN_AREA}, {name}: worst {:.4} <= {APPROX_TOL} ({} of {} within; worst at {})",
                t.worst, t.within, t.plans, t.worst_at
            ),
        );
    }
    v.check(
        random.bound_violations + planned.bound_violations == 0,
        format!(
            "every plan whose wrap and boundary terms bound the gap by {APPROX_TOL} stays within it ({} plans qualify)",
            random.bounded + planned.bounded
        ),
    );

    let mut storage_mismatch = 0;
    let mut layers = 0;
    for name in ["blobs2d", "waves1d"] {
        let mut cfg = ExperimentConfig::bundled(name).unwrap();
        cfg.steps = 5;
        let model = train(&cfg).unwrap().model;
        let (_, sections) = checkpoint::from_bytes_with_sections(&checkpoint::to_bytes(&model)).unwrap();
        for (s, e) in sections.iter().zip(model.epitome_layers()) {
            storage_mismatch += usize::from(s.stored_numbers() != stored_formula(&e.plan));
            layers += 1;
        }
    }
    for (c, _, _) in PLANNED {
        let (cfg, _) = plan_from_multiplier(&base, c).unwrap();
        for layer in cfg.resolve().unwrap() {
            if let Some(plan) = layer.plan().unwrap() {
                storage_mismatch += usize::from(layer.params().unwrap() != stored_formula(&plan) + if layer.bias { layer.weight.c_out } else { 0 });
                layers += 1;
            }
        }
    }
    v.check(
        storage_mismatch == 0,
        format!("stored numbers equal W^E H^E C^E_in C^E_out + 3 R_cin + R_cout on {layers} layers (checkpoints and cost model)"),
    );
}

fn partition_properties(v: &mut Verdict) {
    let config = ProptestConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let spatial = |k: u8| [[4, 4], [5, 0], [0, 0]][k as usize];
    let mut results = Vec::new();

    let mut runner = TestRunner::new(config.clone());
    let r = runner.run(&(1usize..=8, 0usize..8, 0.0f64..1.0), |(len, gsel, frac)| {
        let divisors: Vec<usize> = (1..=len).filter(|g| len % g == 0).collect();
        let g = divisors[gsel % divisors.len()];
        let u = frac * len as f64 / g as f64;
        let terms: Vec<f64> = (0..=len / g).map(|n| interp_kernel(n as f64, u)).filter(|&k| k > 0.0).collect();
        prop_assert!((terms.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(!terms.is_empty() && terms.len() <= 2);
        Ok(())
    });
    results.push(("partition of unity (kernel)", r.err().map(|e| e.to_string())));

    let mut runner = TestRunner::new(config.clone());
    let r = runner.run(&(any::<u64>(), 0u8..3), |(seed, k)| {
        let c = random_case(&mut Rng::new(seed), 4, spatial(k), true);
        let ones = Epitome::new(Tensor::filled(&c.plan.epitome.as_array(), 1.0)).unwrap();
        let w = expand_weights(&ones, &c.plan, &c.indices).unwrap();
        prop_assert!(w.data().iter().all(|x| (x - 1.0).abs() < 1e-12));
        Ok(())
    });
    results.push(("partition of unity (expansion of ones)", r.err().map(|e| e.to_string())));

    let mut runner = TestRunner::new(config.clone());
    let r = runner.run(&(any::<u64>(), 0u8..3), |(seed, k)| {
        let c = random_case(&mut Rng::new(seed), 4, spatial(k), true);
        let w = expand_weights(&c.epitome, &c.plan, &c.indices).unwrap();
        prop_assert_eq!(w.shape(), &c.plan.weight.as_array()[..]);
        Ok(())
    });
    results.push(("shape law", r.err().map(|e| e.to_string())));

    let mut runner = TestRunner::new(config.clone());
    let r = runner.run(&(any::<u64>(), 0u8..3, -4.0f64..4.0), |(seed, k, alpha)| {
        let mut rng = Rng::new(seed);
        let c = random_case(&mut rng, 4, spatial(k), true);
        let other = Epitome::random(c.plan.epitome, 1.0, &mut rng).unwrap();
        let mut mix = c.epitome.values().scale(alpha);
        mix.axpy(1.0, other.values()).unwrap();
        let lhs = expand_weights(&Epitome::new(mix).unwrap(), &c.plan, &c.indices).unwrap();
        let mut rhs = expand_weights(&c.epitome, &c.plan, &c.indices).unwrap().scale(alpha);
        rhs.axpy(1.0, &expand_weights(&other, &c.plan, &c.indices).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * rhs.max_abs().max(1.0));
        Ok(())
    });
    results.push(("linearity", r.err().map(|e| e.to_string())));

    let mut runner = TestRunner::new(config.clone());
    let r = runner.run(&(any::<u64>(), 0u8..3, any::<usize>()), |(seed, k, pick)| {
        let c = random_case(&mut Rng::new(seed), 4, spatial(k), true);
        let es = c.plan.epitome;
        let s = pick % es.numel();
        let cc = es.c_in * es.c_out;
        let pos = [s / (es.h * cc), (s / cc) % es.h, (s / es.c_out) % es.c_in, s % es.c_out];
        let mut onehot = Tensor::zeros(&es.as_array());
        onehot.data_mut()[s] = 1.0;
        let influence = expand_weights(&Epitome::new(onehot).unwrap(), &c.plan, &c.indices).unwrap();
        let sh = c.plan.weight.as_array();
        for (n, &x) in influence.data().iter().enumerate() {
            if x != 0.0 {
                let ix = [n / (sh[1] * sh[2] * sh[3]), (n / (sh[2] * sh[3])) % sh[1], (n / sh[3]) % sh[2], n % sh[3]];
                let sup = support(&c.plan, &c.indices, ix);
                prop_assert!((0..4).all(|a| sup[a].contains(&pos[a])), "{:?} reached from {:?}", ix, pos);
            }
        }
        Ok(())
    });
    results.push(("locality", r.err().map(|e| e.to_string())));

    let mut runner = TestRunner::new(config);
    let r = runner.run(&(any::<u64>(), 0u8..3), |(seed, k)| {
        let c = random_case(&mut Rng::new(seed), 4, spatial(k), true);
        let got = expand_weights(&c.epitome, &c.plan, &c.indices).unwrap();
        let want = expand_oracle(&c.epitome, &c.plan, &c.indices);
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-12 * want.max_abs().max(1.0));
        Ok(())
    });
    results.push(("expansion vs full kernel sum", r.err().map(|e| e.to_string())));

    for (name, err) in results {
        let ok = err.is_none();
        v.check(ok, format!("{name}: {PROPERTY_CASES} cases{}", err.map(|e| format!(", {e}")).unwrap_or_default()));
    }
}

fn end_to_end(v: &mut Verdict) {
    let cfg = ExperimentConfig::bundled("blobs2d").unwrap();
    v.check(
        cfg.seed == 7 && cfg.steps == 500 && cfg.learning_rate == 0.05 && cfg.index_mode == IndexMode::Ema,
        format!("bundled toy run: seed {}, {} steps, lr {}, {:?} indices", cfg.seed, cfg.steps, cfg.learning_rate, cfg.index_mode),
    );
    let out = train(&cfg).unwrap();
    for e in out.model.epitome_layers() {
        let ratio = e.plan.weight.numel() as f64 / e.plan.epitome.numel() as f64;
        v.check(
            ratio == TOY_COMPRESSION,
            format!("layer weights / epitome values = {ratio} (with routing map: {:.3})", e.plan.weight.numel() as f64 / e.stored_numbers() as f64),
        );
    }
    v.check(
        out.audit.train_accuracy >= TOY_MIN_ACCURACY,
        format!("learner-free train accuracy {:.4} >= {TOY_MIN_ACCURACY}", out.audit.train_accuracy),
    );
    v.check(
        out.audit.max_output_gap <= TOY_GAP_TOL,
        format!("final-step training forward vs frozen inference gap {:.3e} <= {TOY_GAP_TOL:e}", out.audit.max_output_gap),
    );

    let mut stripped = out.model.clone();
    stripped.strip_learners();
    let reloaded = checkpoint::from_bytes(&checkpoint::to_bytes(&stripped)).unwrap();
    let data = nes::train::load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut identical = true;
    let mut correct = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let a = reloaded.infer(x).unwrap().0;
        identical &= a == out.model.infer(x).unwrap().0;
        correct += usize::from(argmax(&a) == y);
    }
    v.check(
        identical,
        format!("learner-free checkpoint reproduces the trained model bit for bit on {} samples", data.len()),
    );
    v.note(format!(
        "checkpoint accuracy {:.4}, final loss {:.4}, index drift at last step {:.3e}",
        correct as f64 / data.len() as f64,
        out.metrics.last().unwrap().loss,
        out.audit.max_index_drift
    ));
}

fn routing_ema(v: &mut Verdict) {
    v.check(DEFAULT_MOMENTUM == EMA_MOMENTUM, format!("default momentum {DEFAULT_MOMENTUM}"));
    let plan = LayerPlan::new(Shape4::new(3, 3, 12, 10), Shape4::new(6, 6, 6, 5))
        .unwrap()
        .with_betas(4, 3)
        .unwrap();
    let mut rng = Rng::new(17);
    let lim = plan.index_limits();
    let start: Vec<f64> = lim.iter().map(|&l| rng.uniform_range(0.1, 0.45) * l).collect();
    let target: Vec<f64> = lim.iter().map(|&l| rng.uniform_range(0.5, 0.9) * l).collect();
    let fresh = IndexSet::from_flat(&plan, &target).unwrap();
    let mut map = RoutingMap::from_indices(&plan, &IndexSet::from_flat(&plan, &start).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for n in 1..=EMA_STEPS {
        map.update(&fresh).unwrap();
        let decay = EMA_MOMENTUM.powi(n);
        for ((got, a), b) in map.entries().iter().zip(&start).zip(&target) {
            let want = b + (a - b) * decay;
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    v.check(
        worst <= EMA_TOL,
        format!("constant input over {EMA_STEPS} updates follows fresh + (init - fresh) 0.97^N, worst relative {worst:.3e} <= {EMA_TOL:e}"),
    );

    let bytes = map.to_bytes();
    let back = RoutingMap::from_bytes(&bytes).unwrap();
    let same_bits = back
        .entries()
        .iter()
        .zip(map.entries())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let frozen = map.clone().frozen();
    let fb = frozen.to_bytes();
    let fback = RoutingMap::from_bytes(&fb).unwrap();
    v.check(
        same_bits && back == map && back.to_bytes() == bytes && fback == frozen && fback.to_bytes() == fb,
        format!("routing map round trip bit-exact ({} bytes, live and frozen)", bytes.len()),
    );
}

fn main() {
    let strict = std::env::var("NES_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let results = [
        run(1, "cost-model reproduction", Some(COST_BUDGET), cost_model),
        run(2, "oracle equivalence", Some(ORACLE_BUDGET), oracle_equivalence),
        run(3, "gradient correctness", Some(GRAD_BUDGET), gradient_correctness),
        run(4, "count exactness", None, count_exactness),
        run(5, "interpolation and partition properties", Some(PROPERTY_BUDGET), partition_properties),
        run(6, "end-to-end desk-scale learning", Some(TOY_BUDGET), end_to_end),
        run(7, "routing-map EMA", None, routing_ema),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}
