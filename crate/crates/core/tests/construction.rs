use conv_tickets::activation::Activation;
use conv_tickets::construction::{
    construct, plan, sample_source, ConstructionReport, ParamRef, PlanOptions, ProblemKind, SourcePlan, TargetRef, Variant,
};
use conv_tickets::network::{apply_mask, random_target, Layer, LayerArch, LayerSpec, Mask, NetworkSpec};
use conv_tickets::subset_sum::SolveMode;
use conv_tickets::tensor::{convolve, Filter, SkipKind};
use conv_tickets::verification::{param_reconstruction, verify_sup_error, InputDomain};
use proptest::prelude::*;

fn arch(channels: &[usize], kernel: usize) -> Vec<LayerArch> {
    channels
        .windows(2)
        .map(|w| LayerArch {
            in_channels: w[0],
            out_channels: w[1],
            kernel,
            stride: 1,
        })
        .collect()
}

fn desk_options() -> PlanOptions {
    let mut o = PlanOptions::new(0.1, 0.1);
    o.block_size = Some(15);
    o.solve_mode = SolveMode::Optimal;
    o
}

struct Run {
    target: NetworkSpec,
    source: NetworkSpec,
    plan: SourcePlan,
    mask: Mask,
    report: ConstructionReport,
    ticket: NetworkSpec,
}

fn run(target: NetworkSpec, variant: Variant, opts: &PlanOptions, seed: u64) -> Run {
    let plan = plan(&target, variant, opts).unwrap();
    let source = sample_source(&plan, seed).unwrap();
    let (mask, report) = construct(&target, &source, &plan, seed).unwrap();
    let ticket = apply_mask(&source, &mask).unwrap();
    Run {
        target,
        source,
        plan,
        mask,
        report,
        ticket,
    }
}

fn sup_error(r: &Run, dims: Vec<usize>, samples: usize) -> f64 {
    let domain = InputDomain::unit_cube(r.target.input_channels(), dims);
    verify_sup_error(&r.target, &r.ticket, samples, 11, &domain, &r.report.layer_map)
        .unwrap()
        .sup_error
}

fn single_weight_target(w: f64) -> NetworkSpec {
    let mut layer = Layer::zeros(LayerSpec {
        in_channels: 1,
        out_channels: 1,
        kernel: vec![1],
        stride: 1,
        activation: Activation::Relu,
        has_bias: true,
    });
    layer.weights[0] = w;
    NetworkSpec::new(1, vec![layer], vec![]).unwrap()
}

#[test]
fn single_weight_two_for_one_matches_scaled_relu() {
    // Planned at the theoretical block size and tolerance.
    let r = run(single_weight_target(0.4), Variant::TwoForOne, &PlanOptions::new(0.1, 0.1), 5);
    assert_eq!(r.report.failed_problems, 0);
    assert!(sup_error(&r, vec![5], 100) <= 0.1);
    let domain = InputDomain::unit_cube(1, vec![5]);
    let v = verify_sup_error(&r.target, &r.ticket, 100, 2, &domain, &[]).unwrap();
    assert!(v.sup_error <= 0.1, "{}", v.sup_error);
}

#[test]
fn zero_target_weight_gets_no_problem_and_masked_entries() {
    let mut target = random_target(&arch(&[2, 3], 3), 2, Activation::Relu, 0.5, &[], 40).unwrap();
    let zero = target.layer(1).spec.weight_index(1, 0, 4);
    {
        let mut layers = target.layers().to_vec();
        layers[0].weights[zero] = 0.0;
        target = NetworkSpec::new(2, layers, vec![]).unwrap();
    }
    let r = run(target, Variant::TwoForOne, &desk_options(), 3);
    let zero_ref = ParamRef::Weight { layer: 1, index: zero };
    assert!(r
        .report
        .problems
        .iter()
        .all(|p| p.target != TargetRef::Param { param: zero_ref }));

    // Neurons of the univariate layer that replicate input channel 0.
    let uni = &r.source.layer(1).spec;
    let q0 = (uni.kernel_len() - 1) / 2;
    let comb = &r.source.layer(2).spec;
    for s in 0..uni.out_channels {
        if r.mask.layers[0].weights[uni.weight_index(s, 0, q0)] {
            assert!(!r.mask.layers[1].weights[comb.weight_index(1, s, 4)]);
        }
    }
}

#[test]
fn reconstruction_matches_report_bit_exactly() {
    for variant in [Variant::TwoForOne, Variant::DepthPlusOne] {
        let target = random_target(&arch(&[2, 3, 2], 3), 2, Activation::Relu, 0.5, &[], 21).unwrap();
        let r = run(target, variant, &desk_options(), 4);
        let rows = param_reconstruction(&r.target, &r.source, &r.mask, &r.report).unwrap();
        assert_eq!(rows.len(), r.report.problems.len());
        for (row, p) in rows.iter().zip(&r.report.problems) {
            assert!(row.matches_report);
            if p.success {
                assert!(row.error <= p.tolerance);
            }
            if let TargetRef::Param { param } = p.target {
                assert_ne!(param.value(&r.target).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn ticket_is_a_subnetwork_of_the_source() {
    let target = random_target(&arch(&[2, 3, 3], 3), 2, Activation::Relu, 0.5, &[1], 8).unwrap();
    let r = run(target, Variant::DepthPlusOne, &desk_options(), 6);
    for (t, s) in r.ticket.layers().iter().zip(r.source.layers()) {
        for (a, b) in t.weights.iter().chain(&t.biases).zip(s.weights.iter().chain(&s.biases)) {
            assert!(*a == 0.0 || a.to_bits() == b.to_bits());
        }
    }
    assert_eq!(r.ticket.skips(), r.source.skips());
}

#[test]
fn construction_is_deterministic_at_any_thread_count() {
    let target = random_target(&arch(&[2, 3, 3], 3), 2, Activation::Relu, 0.5, &[1], 9).unwrap();
    let opts = desk_options();
    let masks: Vec<Mask> = [1, 4]
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| run(target.clone(), Variant::DepthPlusOne, &opts, 12).mask)
        })
        .collect();
    assert_eq!(masks[0], masks[1]);
}

#[test]
fn depth_plus_one_small_target_within_epsilon() {
    let target = random_target(&arch(&[2, 3, 2], 3), 2, Activation::Relu, 0.5, &[], 31).unwrap();
    let r = run(target, Variant::DepthPlusOne, &desk_options(), 2);
    let e = sup_error(&r, vec![8, 8], 100);
    assert!(e <= 0.1, "sup error {e}");
}

#[test]
fn depth_plus_one_keeps_the_residual_block() {
    let target = random_target(&arch(&[3, 4, 4], 3), 2, Activation::Relu, 0.5, &[1], 1002).unwrap();
    let r = run(target, Variant::DepthPlusOne, &desk_options(), 2);
    let skip = &r.ticket.skips()[0];
    let SkipKind::Identity { map } = &skip.kind else {
        panic!("residual became a general skip");
    };
    assert_eq!((skip.from, skip.to), (2, 3));
    assert_eq!(map.len(), r.target.channels(2));
    let replicas = r.plan.replicas.unwrap();
    let spec = &r.source.layer(2).spec;
    for (i, m) in map.iter().enumerate() {
        let slot = m.expect("every target channel carries its residual");
        assert_eq!(slot / replicas, i);
        let kept = (0..spec.in_channels * spec.kernel_len())
            .any(|k| r.mask.layers[1].weights[slot * spec.in_channels * spec.kernel_len() + k]);
        assert!(kept, "residual source slot {slot} was not constructed");
    }
}

#[test]
fn solved_problems_stay_within_rho() {
    let target = random_target(&arch(&[2, 3, 3], 3), 2, Activation::Relu, 0.5, &[1], 17).unwrap();
    let r = run(target, Variant::DepthPlusOne, &desk_options(), 1);
    let rho = r.plan.rho.unwrap();
    assert!((r.report.problems.len() as f64) <= rho);
    assert_eq!(r.report.problems_within_rho, Some(true));
}

#[test]
fn reports_count_failures_and_breach_together() {
    let target = random_target(&arch(&[2, 3, 2], 3), 2, Activation::Relu, 0.5, &[], 3).unwrap();
    let r = run(target, Variant::TwoForOne, &desk_options(), 0);
    let failed = r.report.problems.iter().filter(|p| !p.success).count();
    assert_eq!(failed, r.report.failed_problems);
    assert_eq!(r.report.budget_breach, failed > 0);
    let per_layer: usize = r.report.layers.iter().map(|l| l.problems).sum();
    assert_eq!(per_layer, r.report.problems.len());
    assert!(r
        .report
        .problems
        .iter()
        .any(|p| p.kind == ProblemKind::Constant));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replica_sums_are_linear(
        dims in prop::collection::vec(1usize..7, 2),
        filters in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 9), 1..6),
        x in prop::collection::vec(-1.0f64..1.0, 36),
        lambdas in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let n: usize = dims.iter().product();
        let x = &x[..n];
        let mut lhs = vec![0.0; n];
        let mut combined = vec![0.0; 9];
        for (w, lam) in filters.iter().zip(&lambdas) {
            let replica: Vec<f64> = x.iter().map(|v| lam * v).collect();
            let (out, _) = convolve(&Filter::new(w.clone(), vec![3, 3], 1).unwrap(), &replica, &dims).unwrap();
            lhs.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
            combined.iter_mut().zip(w).for_each(|(c, wi)| *c += wi * lam);
        }
        let (rhs, _) = convolve(&Filter::new(combined, vec![3, 3], 1).unwrap(), x, &dims).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            let scale = a.abs().max(b.abs()).max(1.0);
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}
