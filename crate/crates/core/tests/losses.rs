mod common;

use common::*;
use excl_core::experts::{ParamView, PromptExpert, SourceExpert};
use excl_core::geometry::CenterBank;
use excl_core::losses::*;
use excl_core::numerics::{finite_diff_gradient, softmax, Matrix, ProbVec, Rng, DEFAULT_FD_STEP};
use proptest::prelude::*;

fn probvec_strategy(c: usize) -> impl Strategy<Value = ProbVec> {
    prop::collection::vec(-6.0f64..6.0, c).prop_map(|l| softmax(&l, 1.0).unwrap())
}

fn paired_batch(c: usize, max_n: usize) -> impl Strategy<Value = (Vec<ProbVec>, Vec<ProbVec>)> {
    (1..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(probvec_strategy(c), n),
            prop::collection::vec(probvec_strategy(c), n),
        )
    })
}

proptest! {
    #[test]
    fn mutual_information_loss_is_never_positive(
        (os, ov) in (2usize..6).prop_flat_map(|c| paired_batch(c, 12))
    ) {
        let j = joint_distribution(&os, &ov).unwrap();
        prop_assert!(mutual_information_loss(&j) <= 1e-12);
        prop_assert!((j.table().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mutual_information_is_symmetric_under_expert_swap(
        (os, ov) in (2usize..6).prop_flat_map(|c| paired_batch(c, 12))
    ) {
        let a = mutual_information_loss(&joint_distribution(&os, &ov).unwrap());
        let b = mutual_information_loss(&joint_distribution(&ov, &os).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn uniform_partner_carries_no_information(
        os in (2usize..6).prop_flat_map(|c| prop::collection::vec(probvec_strategy(c), 1..10))
    ) {
        let c = os[0].len();
        let ov = vec![ProbVec::uniform(c); os.len()];
        let mi = mutual_information_loss(&joint_distribution(&os, &ov).unwrap());
        prop_assert!(mi.abs() <= 1e-12);
    }

    #[test]
    fn prompt_consistency_is_non_negative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let e = random_prompt(&mut rng, 4, 5, 3, 0.1);
        let xs = random_inputs(&mut rng, 6, 4);
        prop_assert!(prompt_consistency_loss(&e, &xs).unwrap() >= -1e-12);
    }
}

#[test]
fn perfect_agreement_reaches_minus_log_c() {
    for c in [2usize, 3, 5] {
        let os: Vec<ProbVec> = (0..c).map(|k| ProbVec::one_hot(c, k)).collect();
        let mi = mutual_information_loss(&joint_distribution(&os, &os).unwrap());
        assert!((mi + (c as f64).ln()).abs() < 1e-9, "C={c}: {mi}");
    }
}

#[test]
fn prompt_consistency_is_zero_without_prompt() {
    let mut rng = Rng::new(11);
    let mut e = random_prompt(&mut rng, 4, 5, 3, 0.1);
    e.write_params(&ParamView(vec![0.0; 5])).unwrap();
    let xs = random_inputs(&mut rng, 10, 4);
    assert_eq!(prompt_consistency_loss(&e, &xs).unwrap(), 0.0);
}

struct Fixture {
    source: SourceExpert,
    prompt: PromptExpert,
    pseudo: Vec<Vec<f64>>,
    pseudo_partner: Vec<ProbVec>,
    complex: Vec<Vec<f64>>,
    complex_categories: Vec<usize>,
    mi: Vec<Vec<f64>>,
    mi_prompt_cache: Vec<ProbVec>,
    mi_source_cache: Vec<ProbVec>,
    centers: CenterBank,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = Rng::new(seed);
    let (d_in, hidden, c, rank, embed) = (5, 6, 3, 2, 4);
    let source = random_source(&mut rng, d_in, hidden, c, rank);
    let prompt = random_prompt(&mut rng, d_in, embed, c, 0.1);
    let pseudo = random_inputs(&mut rng, 4, d_in);
    let pseudo_partner = (0..4).map(|_| random_probvec(&mut rng, c)).collect();
    let complex = random_inputs(&mut rng, 5, d_in);
    let complex_categories = (0..5).map(|_| rng.below(c)).collect();
    let mi = random_inputs(&mut rng, 6, d_in);
    let mi_prompt_cache = (0..6).map(|_| random_probvec(&mut rng, c)).collect();
    let mi_source_cache = (0..6).map(|_| random_probvec(&mut rng, c)).collect();
    let mut centers = CenterBank::default();
    for k in 0..c {
        centers.insert(k, (0..hidden).map(|_| rng.normal()).collect(), 1);
    }
    Fixture {
        source,
        prompt,
        pseudo,
        pseudo_partner,
        complex,
        complex_categories,
        mi,
        mi_prompt_cache,
        mi_source_cache,
        centers,
    }
}

fn adapter_report(f: &Fixture, e: &SourceExpert, toggles: LossToggles) -> LossReport {
    let (pseudo, complex, mi) = (refs(&f.pseudo), refs(&f.complex), refs(&f.mi));
    let batch = AdapterBatch {
        pseudo: &pseudo,
        pseudo_partner: &f.pseudo_partner,
        complex: &complex,
        complex_categories: &f.complex_categories,
        mi: &mi,
        mi_partner: &f.mi_prompt_cache,
    };
    adapter_objective(e, &batch, &f.centers, toggles).unwrap()
}

fn prompt_report(f: &Fixture, e: &PromptExpert, toggles: LossToggles) -> LossReport {
    let (complex, mi) = (refs(&f.complex), refs(&f.mi));
    let batch = PromptBatch {
        complex: &complex,
        mi: &mi,
        mi_partner: &f.mi_source_cache,
    };
    prompt_objective(e, &batch, toggles).unwrap()
}

#[test]
fn adapter_gradient_matches_finite_differences_per_toggle() {
    let f = fixture(21);
    for (_, toggles) in excl_core::bench::ABLATION_ROWS {
        let report = adapter_report(&f, &f.source, toggles);
        let numeric = finite_diff_gradient(
            |p| {
                let mut e = f.source.clone();
                e.write_params(&ParamView(p.to_vec())).unwrap();
                adapter_report(&f, &e, toggles).total
            },
            &f.source.flatten_params().0,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let err = worst_relative_error(&report.grad, &numeric, 1e-6);
        assert!(err < 1e-4, "{toggles:?}: relative error {err}");
    }
}

#[test]
fn prompt_gradient_matches_finite_differences_per_toggle() {
    let f = fixture(22);
    for (_, toggles) in excl_core::bench::ABLATION_ROWS {
        let report = prompt_report(&f, &f.prompt, toggles);
        let numeric = finite_diff_gradient(
            |p| {
                let mut e = f.prompt.clone();
                e.write_params(&ParamView(p.to_vec())).unwrap();
                prompt_report(&f, &e, toggles).total
            },
            &f.prompt.flatten_params().0,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let err = worst_relative_error(&report.grad, &numeric, 1e-6);
        assert!(err < 1e-4, "{toggles:?}: relative error {err}");
    }
}

#[test]
fn totals_equal_component_sums_and_mi_is_separable() {
    let f = fixture(23);
    let full = adapter_report(&f, &f.source, LossToggles::ALL);
    let no_mi = adapter_report(&f, &f.source, LossToggles::new(true, true, false));
    assert!((full.total - full.components.sum()).abs() < 1e-9);
    assert!((full.total - no_mi.total - full.components.mi).abs() < 1e-12);

    let full = prompt_report(&f, &f.prompt, LossToggles::ALL);
    let no_mi = prompt_report(&f, &f.prompt, LossToggles::new(true, true, false));
    assert!((full.total - full.components.sum()).abs() < 1e-9);
    assert!((full.total - no_mi.total - full.components.mi).abs() < 1e-12);
}

#[test]
fn prompt_objective_is_neutral_without_prompt_and_uniform_partner() {
    let mut f = fixture(24);
    f.prompt.write_params(&ParamView(vec![0.0; 4])).unwrap();
    f.mi_source_cache = vec![ProbVec::uniform(3); f.mi.len()];
    let r = prompt_report(&f, &f.prompt, LossToggles::ALL);
    assert_eq!(r.components.psc, 0.0);
    assert!(r.components.mi.abs() < 1e-12);
}

#[test]
fn prompt_objective_ignores_batch_order() {
    let f = fixture(25);
    let base = prompt_report(&f, &f.prompt, LossToggles::ALL);
    let mut g = fixture(25);
    g.complex.reverse();
    g.mi.reverse();
    g.mi_source_cache.reverse();
    let permuted = prompt_report(&g, &g.prompt, LossToggles::ALL);
    assert!((base.total - permuted.total).abs() < 1e-9);
}

#[test]
fn zero_adapter_on_backbone_centers_has_no_cosine_term() {
    let mut rng = Rng::new(26);
    let w1 = Matrix::random_normal(4, 3, 0.5, &mut rng);
    let w2 = Matrix::random_normal(2, 4, 0.5, &mut rng);
    let e = SourceExpert::new(w1, vec![0.0; 4], w2, vec![0.0; 2], 2, &mut rng).unwrap();
    let xs = random_inputs(&mut rng, 2, 3);
    let mut centers = CenterBank::default();
    centers.insert(0, e.backbone_feature(&xs[0]).unwrap(), 1);
    centers.insert(1, e.backbone_feature(&xs[1]).unwrap(), 1);
    let complex = refs(&xs);
    let batch = AdapterBatch {
        pseudo: &[],
        pseudo_partner: &[],
        complex: &complex,
        complex_categories: &[0, 1],
        mi: &[],
        mi_partner: &[],
    };
    let r = adapter_objective(&e, &batch, &centers, LossToggles::ALL).unwrap();
    assert!(r.components.weisz_cosine.abs() < 1e-12);
}
