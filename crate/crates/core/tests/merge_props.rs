mod common;

use common::oracle;
use proptest::prelude::*;
use vlrm_merge::merge::{
    compute_task_vector, dare_sparsify, disjoint_merge, elect_sign, elect_sign_slices, keep_count, merge_dare,
    merge_linear, merge_task_arithmetic, merge_tensor, merge_ties, merge_transformer, trim_by_magnitude, trim_slice,
    DareMode, DareStream, F32Tensor, MergeError, MergeMethod, MergeRecipe, Origin, TaskVector, TensorMap,
};

fn map(entries: &[(&str, &[f32])]) -> TensorMap {
    entries
        .iter()
        .map(|(n, v)| (n.to_string(), F32Tensor::vector(v.to_vec())))
        .collect()
}

fn one(v: &[f32]) -> TensorMap {
    map(&[("w", v)])
}

fn tv(origin: Origin, v: &[f32]) -> TaskVector {
    TaskVector { origin, deltas: one(v) }
}

fn values(m: &TensorMap) -> Vec<f32> {
    m["w"].values.clone()
}

#[test]
fn task_vector_examples() {
    let t = compute_task_vector(&one(&[3.0]), &one(&[1.0]), Origin::Lvlm).unwrap();
    assert_eq!(values(&t.deltas), vec![2.0]);
    let same = compute_task_vector(&one(&[0.5, -2.0]), &one(&[0.5, -2.0]), Origin::Rm).unwrap();
    assert_eq!(values(&same.deltas), vec![0.0, 0.0]);
}

#[test]
fn task_vector_matches_scalar_loop() {
    let mut rng = common::rng(64);
    let model = common::lattice_values(&mut rng, 64);
    let pre = common::lattice_values(&mut rng, 64);
    let t = compute_task_vector(&one(&model), &one(&pre), Origin::Lvlm).unwrap();
    let want = oracle::tau(&model, &pre);
    assert_eq!(
        values(&t.deltas).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn task_vector_name_mismatch() {
    let err = compute_task_vector(&map(&[("a", &[1.0])]), &map(&[("b", &[1.0])]), Origin::Lvlm).unwrap_err();
    assert!(matches!(err, MergeError::NameMismatch(_)));
    let err = compute_task_vector(&one(&[1.0, 2.0]), &one(&[1.0]), Origin::Lvlm).unwrap_err();
    assert!(matches!(err, MergeError::ShapeMismatch { .. }));
}

#[test]
fn linear_examples() {
    let a = one(&[2.0, 4.0]);
    let b = one(&[0.0, 8.0]);
    assert_eq!(values(&merge_linear(&a, &b, 0.5).unwrap()), vec![1.0, 6.0]);
    assert_eq!(merge_linear(&a, &b, 1.0).unwrap(), a);
    assert_eq!(merge_linear(&a, &b, 0.0).unwrap(), b);
    assert!(matches!(merge_linear(&a, &b, 1.1), Err(MergeError::LambdaOutOfRange { .. })));
    assert!(matches!(merge_linear(&a, &b, -0.1), Err(MergeError::LambdaOutOfRange { .. })));
}

#[test]
fn task_arithmetic_examples() {
    let pre = one(&[1.0]);
    let out = merge_task_arithmetic(&pre, &tv(Origin::Lvlm, &[2.0]), &tv(Origin::Rm, &[-1.0]), 0.5).unwrap();
    assert_eq!(values(&out), vec![1.5]);
    let zero = merge_task_arithmetic(&pre, &tv(Origin::Lvlm, &[2.0]), &tv(Origin::Rm, &[-1.0]), 0.0).unwrap();
    assert_eq!(zero, pre);

    let pre = one(&[0.25, -1.0, 3.0]);
    let lvlm = one(&[1.25, 0.5, 2.0]);
    let tau = compute_task_vector(&lvlm, &pre, Origin::Lvlm).unwrap();
    let out = merge_task_arithmetic(&pre, &tau, &tv(Origin::Rm, &[0.0, 0.0, 0.0]), 1.0).unwrap();
    assert_eq!(out, lvlm);
}

#[test]
fn trim_examples() {
    let v = [0.3, -0.1, 0.5, 0.0];
    assert_eq!(trim_slice(&v, 0.5), vec![0.3, 0.0, 0.5, 0.0]);
    assert_eq!(trim_slice(&v, 1.0), v.to_vec());
    let t = trim_by_magnitude(&tv(Origin::Lvlm, &v), 0.5).unwrap();
    assert_eq!(values(&t.deltas), vec![0.3, 0.0, 0.5, 0.0]);
    assert!(matches!(trim_by_magnitude(&tv(Origin::Lvlm, &v), 0.0), Err(MergeError::DensityOutOfRange(_))));
    assert!(matches!(trim_by_magnitude(&tv(Origin::Lvlm, &v), 1.5), Err(MergeError::DensityOutOfRange(_))));
    // Equal magnitudes at the cut keep the lower index.
    assert_eq!(trim_slice(&[1.0, -1.0, 1.0, 0.5], 0.5), vec![1.0, -1.0, 0.0, 0.0]);
}

#[test]
fn sign_election_examples() {
    assert_eq!(elect_sign_slices(&[&[0.3], &[-0.4]]), vec![-1]);
    assert_eq!(elect_sign_slices(&[&[0.0], &[0.0]]), vec![1]);
    assert_eq!(elect_sign_slices(&[&[0.3, -0.2, 0.0]]), vec![1, -1, 1]);
    assert_eq!(elect_sign_slices(&[&[0.5], &[-0.5]]), vec![1]);
    assert!(matches!(elect_sign(&[]), Err(MergeError::NoTaskVectors)));
}

#[test]
fn disjoint_examples() {
    let taus = [tv(Origin::Lvlm, &[0.5, -0.4, 0.0]), tv(Origin::Rm, &[0.0, 0.3, 0.0])];
    let signs = elect_sign(&taus).unwrap();
    assert_eq!(signs["w"], vec![1, -1, 1]);
    assert_eq!(values(&disjoint_merge(&taus, &signs).unwrap()), vec![0.5, -0.4, 0.0]);
}

#[test]
fn ties_hand_worked() {
    let pre = one(&[0.0; 4]);
    let a = tv(Origin::Lvlm, &[0.3, -0.1, 0.5, 0.0]);
    let b = tv(Origin::Rm, &[-0.4, 0.2, 0.1, 0.0]);
    let ta = trim_by_magnitude(&a, 0.5).unwrap();
    let tb = trim_by_magnitude(&b, 0.5).unwrap();
    assert_eq!(values(&ta.deltas), vec![0.3, 0.0, 0.5, 0.0]);
    assert_eq!(values(&tb.deltas), vec![-0.4, 0.2, 0.0, 0.0]);
    let signs = elect_sign(&[ta.clone(), tb.clone()]).unwrap();
    assert_eq!(signs["w"], vec![-1, 1, 1, 1]);
    assert_eq!(values(&disjoint_merge(&[ta, tb], &signs).unwrap()), vec![-0.4, 0.2, 0.5, 0.0]);
    assert_eq!(values(&merge_ties(&pre, &a, &b, 1.0, 0.5).unwrap()), vec![-0.4, 0.2, 0.5, 0.0]);
}

#[test]
fn ties_equal_positive_taus() {
    let pre = one(&[1.0, 2.0]);
    let t = [0.5, 0.25];
    let out = merge_ties(&pre, &tv(Origin::Lvlm, &t), &tv(Origin::Rm, &t), 0.5, 1.0).unwrap();
    assert_eq!(values(&out), vec![1.25, 2.125]);
}

#[test]
fn ties_single_nonzero_task_at_unit_lambda() {
    let pre = one(&[1.0, -2.0, 0.5]);
    let t = [0.25, -0.5, 0.125];
    let out = merge_ties(&pre, &tv(Origin::Lvlm, &t), &tv(Origin::Rm, &[0.0; 3]), 1.0, 1.0).unwrap();
    assert_eq!(values(&out), vec![1.25, -2.5, 0.625]);
}

#[test]
fn dare_examples() {
    let t = tv(Origin::Rm, &[0.5, -1.0, 2.0]);
    assert_eq!(dare_sparsify(&t, 1.0, 9).unwrap(), t);
    assert_eq!(dare_sparsify(&t, 0.3, 9).unwrap(), dare_sparsify(&t, 0.3, 9).unwrap());
    assert!(matches!(dare_sparsify(&t, 0.0, 9), Err(MergeError::DensityOutOfRange(_))));

    let pre = one(&[1.0, 1.0]);
    let a = tv(Origin::Lvlm, &[0.5, 0.25]);
    let b = tv(Origin::Rm, &[0.25, 0.75]);
    assert_eq!(
        merge_dare(&pre, &a, &b, 0.7, 1.0, 3, DareMode::TaskArithmetic).unwrap(),
        merge_task_arithmetic(&pre, &a, &b, 0.7).unwrap()
    );
    // No sign conflicts, both nonzero: the disjoint mean is the plain mean.
    let out = merge_dare(&pre, &a, &b, 1.0, 1.0, 3, DareMode::Ties).unwrap();
    assert_eq!(values(&out), vec![1.375, 1.5]);
}

#[test]
fn dare_statistics() {
    let n = 100_000;
    let out = dare_sparsify(&tv(Origin::Lvlm, &vec![1.0; n]), 0.4, 2024).unwrap();
    let v = values(&out.deltas);
    let kept = v.iter().filter(|x| **x != 0.0).count() as f64;
    let sd = (n as f64 * 0.4 * 0.6).sqrt();
    assert!((kept - 0.4 * n as f64).abs() < 4.0 * sd, "kept {kept}");
    assert!(v.iter().all(|x| *x == 0.0 || *x == 2.5));
    let mean = v.iter().map(|x| *x as f64).sum::<f64>() / n as f64;
    let mean_sd = (2.5f64 * 2.5 * 0.4 - 1.0).sqrt() / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * mean_sd, "mean {mean}");
}

#[test]
fn dare_streams_differ_by_origin_and_name() {
    let a = DareStream::new(1, Origin::Lvlm, "w").keep_mask(256, 0.5);
    let b = DareStream::new(1, Origin::Rm, "w").keep_mask(256, 0.5);
    let c = DareStream::new(1, Origin::Lvlm, "v").keep_mask(256, 0.5);
    let d = DareStream::new(2, Origin::Lvlm, "w").keep_mask(256, 0.5);
    assert_ne!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
}

#[test]
fn keep_count_grid() {
    for n in 1..=300 {
        for p in [20, 40, 60, 80] {
            assert_eq!(keep_count(p as f32 / 100.0, n), oracle::keep(p, n), "d={p}% n={n}");
        }
    }
    assert_eq!(keep_count(0.6, 5), 3);
    assert_eq!(keep_count(0.5, 0), 0);
    assert_eq!(keep_count(0.001, 10), 1);
}

#[test]
fn recipe_validation() {
    assert!(MergeRecipe::ties(0.5, 0.2).validate().is_ok());
    let mut r = MergeRecipe::ties(0.5, 0.2);
    r.density = None;
    assert_eq!(r.validate(), Err(MergeError::MissingDensity(MergeMethod::Ties)));
    let mut r = MergeRecipe::linear(0.5);
    r.density = Some(0.5);
    assert_eq!(r.validate(), Err(MergeError::UnexpectedDensity(MergeMethod::Linear)));
    let mut r = MergeRecipe::dare(DareMode::Ties, 0.5, 0.2, 1);
    r.seed = None;
    assert_eq!(r.validate(), Err(MergeError::MissingSeed(MergeMethod::DareTies)));
    assert!(MergeRecipe::task_arithmetic(-0.1).validate().is_err());
    assert!(MergeRecipe::task_arithmetic(f32::NAN).validate().is_err());
}

fn arb_method() -> impl Strategy<Value = MergeMethod> {
    prop::sample::select(MergeMethod::ALL.to_vec())
}

fn arb_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![(-8i32..=8).prop_map(|k| k as f32 * 0.125), -2.0f32..2.0], n)
}

fn arb_triple() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
    (1usize..=256).prop_flat_map(|n| (arb_values(n), arb_values(n), arb_values(n)))
}

fn recipe(method: MergeMethod, lambda_step: u32, percent: u32, seed: u64) -> MergeRecipe {
    let max = if method == MergeMethod::Linear { 20 } else { 30 };
    MergeRecipe {
        method,
        lambda: (lambda_step % (max + 1)) as f32 / 20.0,
        density: method.uses_density().then_some(percent as f32 / 100.0),
        seed: method.is_dare().then_some(seed),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merge_tensor_matches_oracle(
        method in arb_method(),
        (pre, lvlm, rm) in arb_triple(),
        lambda_step in 0u32..=30,
        percent in 1u32..=100,
        seed in any::<u64>(),
    ) {
        let r = recipe(method, lambda_step, percent, seed);
        let got = merge_tensor(&r, "t", Some(&pre), &lvlm, &rm).unwrap();
        let want = oracle::merge(method, r.lambda, method.uses_density().then_some(percent), seed, "t", &pre, &lvlm, &rm);
        for (i, (g, (w, scale))) in got.iter().zip(&want).enumerate() {
            let e = oracle::rel_err(*g, *w, *scale);
            prop_assert!(e <= 1e-6, "element {i}: got {g} want {w} err {e}");
        }
    }

    #[test]
    fn map_level_agrees_with_slices(
        method in arb_method(),
        (pre, lvlm, rm) in arb_triple(),
        lambda_step in 0u32..=30,
        percent in 1u32..=100,
        seed in any::<u64>(),
    ) {
        let r = recipe(method, lambda_step, percent, seed);
        let half = lvlm.len() / 2;
        let split = |v: &[f32]| map(&[("a", &v[..half]), ("b", &v[half..])]);
        let (p, a, b) = (split(&pre), split(&lvlm), split(&rm));
        let merged = merge_transformer(&r, &p, &a, &b).unwrap();
        let ta = compute_task_vector(&a, &p, Origin::Lvlm).unwrap();
        let tb = compute_task_vector(&b, &p, Origin::Rm).unwrap();
        let d = r.density.unwrap_or(1.0);
        let staged = match method {
            MergeMethod::Linear => merge_linear(&a, &b, r.lambda).unwrap(),
            MergeMethod::TaskArithmetic => merge_task_arithmetic(&p, &ta, &tb, r.lambda).unwrap(),
            MergeMethod::Ties => merge_ties(&p, &ta, &tb, r.lambda, d).unwrap(),
            MergeMethod::DareTaskArithmetic => merge_dare(&p, &ta, &tb, r.lambda, d, seed, DareMode::TaskArithmetic).unwrap(),
            MergeMethod::DareTies => merge_dare(&p, &ta, &tb, r.lambda, d, seed, DareMode::Ties).unwrap(),
        };
        prop_assert_eq!(&merged, &staged);
        for name in ["a", "b"] {
            let direct = merge_tensor(&r, name, Some(&p[name].values), &a[name].values, &b[name].values).unwrap();
            prop_assert_eq!(&merged[name].values, &direct);
        }
    }

    #[test]
    fn trim_keeps_top_k(values in (1usize..=300).prop_flat_map(arb_values), percent in 1u32..=100) {
        let d = percent as f32 / 100.0;
        let got = trim_slice(&values, d);
        let mask = oracle::top_k(&values, oracle::keep(percent, values.len()));
        for i in 0..values.len() {
            let want = if mask[i] { values[i] } else { 0.0 };
            prop_assert_eq!(got[i].to_bits(), want.to_bits(), "index {}", i);
        }
        let nonzero = got.iter().filter(|v| **v != 0.0).count();
        prop_assert!(nonzero <= keep_count(d, values.len()));
    }

    #[test]
    fn trim_count_exact_without_zeros(
        values in prop::collection::vec(prop_oneof![0.001f32..10.0, -10.0f32..-0.001], 1..=300),
        p in prop::sample::select(vec![20u32, 40, 60, 80]),
    ) {
        let got = trim_slice(&values, p as f32 / 100.0);
        let n = values.len();
        prop_assert_eq!(got.iter().filter(|v| **v != 0.0).count(), (p as usize * n).div_ceil(100));
    }

    #[test]
    fn keep_mask_matches_uniform(seed in any::<u64>(), n in 0usize..10_000, percent in 1u32..100) {
        let d = percent as f32 / 100.0;
        let s = DareStream::new(seed, Origin::Rm, "layer");
        let mask = s.keep_mask(n, d);
        for i in (0..n).step_by(97) {
            prop_assert_eq!(mask[i], s.uniform(i) < d as f64, "index {}", i);
        }
    }

    #[test]
    fn task_arithmetic_homogeneity(
        (a, b) in (1usize..=64).prop_flat_map(|n| (arb_values(n), arb_values(n))),
        k in -4i32..=4,
        lambda_step in 0u32..=30,
    ) {
        let c = 2f32.powi(k);
        let lambda = lambda_step as f32 / 20.0;
        let pre = one(&vec![0.0; a.len()]);
        let scaled = |v: &[f32]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let base = merge_task_arithmetic(&pre, &tv(Origin::Lvlm, &a), &tv(Origin::Rm, &b), lambda).unwrap();
        let big = merge_task_arithmetic(&pre, &tv(Origin::Lvlm, &scaled(&a)), &tv(Origin::Rm, &scaled(&b)), lambda).unwrap();
        for (x, y) in values(&base).iter().zip(values(&big)) {
            prop_assert_eq!((x * c).to_bits(), y.to_bits());
        }
    }

    #[test]
    fn identity_ladder((pre, lvlm, rm) in arb_triple(), seed in any::<u64>(), percent in 1u32..=100) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let run = |r: MergeRecipe| merge_tensor(&r, "t", Some(&pre), &lvlm, &rm).unwrap();
        prop_assert_eq!(bits(&run(MergeRecipe::linear(1.0))), bits(&lvlm));
        prop_assert_eq!(bits(&run(MergeRecipe::linear(0.0))), bits(&rm));
        prop_assert_eq!(bits(&run(MergeRecipe::task_arithmetic(0.0))), bits(&pre));
        let lambda = (percent % 31) as f32 / 20.0;
        prop_assert_eq!(
            run(MergeRecipe::dare(DareMode::TaskArithmetic, lambda, 1.0, seed)),
            run(MergeRecipe::task_arithmetic(lambda))
        );
        prop_assert_eq!(
            run(MergeRecipe::dare(DareMode::Ties, lambda, 1.0, seed)),
            run(MergeRecipe::ties(lambda, 1.0))
        );
    }
}
