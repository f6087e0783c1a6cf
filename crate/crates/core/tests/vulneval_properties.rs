use morphbench::morpher::{MorphMethod, MorphRecord};
use morphbench::nets::{match_score, Biometric, BiometricConfig};
use morphbench::stylegen::{Generator, GeneratorConfig, Mapping};
use morphbench::vulneval::*;
use morphbench::Tensor;
use proptest::prelude::*;

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    // Coarse grid so that ties are common.
    prop::collection::vec((-40i32..=40).prop_map(|k| k as f64 / 40.0), 1..max)
}

fn count_ge(v: &[f64], t: f64) -> usize {
    v.iter().filter(|&&s| s >= t).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rates_match_counting(g in scores(60), i in scores(60), m in scores(60), t in -1.2f64..1.2) {
        let s = ScoreSet { genuine: g.clone(), imposter: i.clone(), mmmss: m.clone() };
        let r = rates_at(&s, t).unwrap();
        prop_assert_eq!(r.far, count_ge(&i, t) as f64 / i.len() as f64);
        prop_assert_eq!(r.frr, (g.len() - count_ge(&g, t)) as f64 / g.len() as f64);
        prop_assert_eq!(r.mmpmr, count_ge(&m, t) as f64 / m.len() as f64);
        prop_assert_eq!(r.rmmr, r.mmpmr + r.frr);
    }

    #[test]
    fn far_threshold_honors_target(i in scores(80), target in 0.0f64..1.0) {
        let t = threshold_at_far(&i, target).unwrap();
        prop_assert!(far_at(&i, t).unwrap() <= target);
        // Smallest such observed score: the next lower observed score breaks the bound.
        if let Some(lower) = i.iter().copied().filter(|&s| s < t).fold(None, |a: Option<f64>, s| Some(a.map_or(s, |a| a.max(s)))) {
            if i.contains(&t) {
                prop_assert!(far_at(&i, lower).unwrap() > target);
            }
        }
    }

    #[test]
    fn frr_threshold_honors_target_and_is_monotone(g in scores(80), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t_lo = threshold_at_frr(&g, lo).unwrap();
        let t_hi = threshold_at_frr(&g, hi).unwrap();
        prop_assert!(frr_at(&g, t_lo).unwrap() <= lo);
        prop_assert!(frr_at(&g, t_hi).unwrap() <= hi);
        prop_assert!(t_lo <= t_hi);
        prop_assert!(g.contains(&t_lo));
    }

    #[test]
    fn roc_is_monotone_and_rmmr_identity_holds(g in scores(60), m in scores(60), i in prop::option::of(scores(30))) {
        let s = ScoreSet { genuine: g, imposter: i.unwrap_or_default(), mmmss: m };
        let roc = roc_mmpmr_frr(&s).unwrap();
        prop_assert_eq!(roc.first().map(|p| (p.frr, p.mmpmr)), Some((0.0, 1.0)));
        prop_assert_eq!(roc.last().map(|p| (p.frr, p.mmpmr)), Some((1.0, 0.0)));
        for w in roc.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[0].frr <= w[1].frr);
            prop_assert!(w[0].mmpmr >= w[1].mmpmr);
        }
        for p in &roc {
            prop_assert_eq!(p.far.is_some(), !s.imposter.is_empty());
            if let Some(far) = p.far {
                let r = rates_at(&s, p.threshold).unwrap();
                prop_assert_eq!((r.far, r.frr, r.mmpmr), (far, p.frr, p.mmpmr));
                prop_assert_eq!(r.rmmr, r.mmpmr + r.frr);
            }
        }
    }

    #[test]
    fn mmmss_is_min_of_scores(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let r = MorphRecord::new(MorphMethod::Bio, 0, 1, Tensor::zeros(&[2, 2, 3]), a, b);
        prop_assert!(r.mmmss <= r.score_accomplice && r.mmmss <= r.score_imposter);
        prop_assert_eq!(r.mmmss, a.min(b));
    }

    #[test]
    fn histogram_counts_every_score(g in scores(50), i in scores(50), m in scores(50)) {
        let s = ScoreSet { genuine: g, imposter: i, mmmss: m };
        let h = Histogram::of(&s);
        let csv = h.to_csv();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        prop_assert_eq!(rows.len(), HISTOGRAM_BINS);
        let mut totals = [0usize; 3];
        for r in rows {
            let f: Vec<&str> = r.split(',').collect();
            for k in 0..3 {
                totals[k] += f[2 + k].parse::<usize>().unwrap();
            }
        }
        prop_assert_eq!(totals, [s.genuine.len(), s.imposter.len(), s.mmmss.len()]);
    }
}

#[test]
fn all_morphs_below_genuine_reaches_origin() {
    let s = ScoreSet {
        genuine: vec![0.8, 0.9, 0.95],
        imposter: vec![0.1],
        mmmss: vec![0.2, 0.5],
    };
    let roc = roc_mmpmr_frr(&s).unwrap();
    assert!(roc.iter().any(|p| p.frr == 0.0 && p.mmpmr == 0.0));
}

#[test]
fn oracle_suite_on_random_sets() {
    // The same sets the selftest uses, sizes 1-1000.
    for seed in 0..100 {
        let s = morphbench::selftest::random_score_set(seed, 1000);
        morphbench::selftest::check_score_set(&s, seed).unwrap();
    }
}

fn tiny_population() -> (Generator, Mapping, Biometric, Population) {
    let gc = GeneratorConfig::default();
    let gen = Generator::init(1, gc).unwrap();
    let mapping = Mapping::init(1, gc).unwrap();
    let stats = mapping.map_and_average(1000, 1).unwrap();
    let bio = Biometric::init(1, BiometricConfig::default()).unwrap();
    let cfg = PopulationConfig {
        n_ids: 12,
        imgs_per_id: 2,
        ..Default::default()
    };
    let pop = build_population(&gen, &mapping, &bio, &stats, &cfg).unwrap();
    (gen, mapping, bio, pop)
}

#[test]
fn accomplice_selection_reproducible_and_matches_rescan() {
    let (_, _, _, pop) = tiny_population();
    let a = select_accomplices(&pop, 5, 3).unwrap();
    let b = select_accomplices(&pop, 5, 3).unwrap();
    assert_eq!(a.len(), pop.len());
    for (m, again) in a.iter().zip(&b) {
        assert_eq!((m.accomplice, m.score, &m.friends), (again.accomplice, again.score, &again.friends));
        assert_eq!(m.friends.len(), 5);
        assert!(!m.friends.contains(&m.subject));
        let subj = pop.identities[m.subject].representative_embedding();
        let scored: Vec<(usize, f64)> = m
            .friends
            .iter()
            .map(|&f| (f, match_score(subj, pop.identities[f].representative_embedding())))
            .collect();
        let best = scored.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        let expect = scored.iter().filter(|&&(_, s)| s == best).map(|&(f, _)| f).min().unwrap();
        assert_eq!((m.accomplice, m.score), (expect, best));
    }
    let other_seed = select_accomplices(&pop, 5, 4).unwrap();
    assert!(a.iter().zip(&other_seed).any(|(x, y)| x.friends != y.friends));
}

#[test]
fn population_pairs_and_roundtrip() {
    let (_, _, _, pop) = tiny_population();
    let n = pop.len();
    assert_eq!(pop.genuine_pairs().len(), n);
    assert_eq!(pop.imposter_pairs().len(), n * (n - 1) / 2 * 4);
    let dir = tempfile::tempdir().unwrap();
    pop.save(dir.path()).unwrap();
    let back = Population::load(dir.path()).unwrap();
    assert_eq!(back.config, pop.config);
    for (x, y) in back.identities.iter().zip(&pop.identities) {
        assert_eq!(x.images, y.images);
        assert_eq!(x.embeddings, y.embeddings);
        assert_eq!(x.representative, y.representative);
    }
}

#[test]
fn image_directory_population_takes_first_image() {
    let (_, _, bio, pop) = tiny_population();
    let dir = tempfile::tempdir().unwrap();
    for (i, id) in pop.identities.iter().take(3).enumerate() {
        let d = dir.path().join(format!("id{i}"));
        std::fs::create_dir_all(&d).unwrap();
        for (k, x) in id.images.iter().enumerate() {
            morphbench::mten::write(d.join(format!("{k}.mten")), x).unwrap();
        }
    }
    let from_dir = Population::from_image_dir(dir.path(), &bio).unwrap();
    assert_eq!(from_dir.len(), 3);
    for (x, y) in from_dir.identities.iter().zip(&pop.identities) {
        assert_eq!(x.representative, 0);
        assert_eq!(x.images, y.images);
        assert_eq!(x.embeddings, y.embeddings);
    }
}

#[test]
fn refused_anchor_below_one_over_n() {
    let s = ScoreSet {
        genuine: vec![0.9; 10],
        imposter: vec![0.1; 1000],
        mmmss: vec![0.5; 4],
    };
    let r = EvalReport::at_far(&s, 1e-5).unwrap();
    assert!(r.refused);
    let ok = EvalReport::at_far(&s, 1e-3).unwrap();
    assert!(!ok.refused);
    assert_eq!(ok.rmmr, ok.mmpmr.map(|m| m + ok.frr.unwrap()));
}
