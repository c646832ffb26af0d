use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::datasets::{build, DatasetSpec, MarkovSpec, TableEntry};
use crate::predictor::OraclePredictor;
use crate::rng::seeded;
use crate::tokens::VocabSpec;

fn table(entries: Vec<(Vec<u32>, f64)>, data_size: u32) -> OraclePredictor {
    let length = entries[0].0.len();
    let spec = DatasetSpec::Table {
        length,
        data_size,
        entries: entries
            .into_iter()
            .map(|(tokens, prob)| TableEntry {
                tokens,
                prob,
                class: None,
            })
            .collect(),
        num_classes: 0,
    };
    OraclePredictor::new(Arc::new(build(&spec, &mut seeded(0)).unwrap()))
}

fn markov_oracle() -> OraclePredictor {
    let spec = MarkovSpec {
        length: 4,
        data_size: 3,
        initial: vec![0.5, 0.3, 0.2],
        transition: vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
        ],
        support_cap: 4096,
        allow_truncation: false,
    };
    OraclePredictor::new(Arc::new(
        build(&DatasetSpec::Markov(spec), &mut seeded(0)).unwrap(),
    ))
}

fn config(kind: SamplerKind, nfe: usize) -> SamplerConfig {
    SamplerConfig {
        kind,
        nfe,
        ..SamplerConfig::default()
    }
}

#[test]
fn top_p_examples() {
    let p = [0.6, 0.3, 0.1];
    assert_eq!(filter_top_p(&p, 1.0), p.to_vec());
    let f = filter_top_p(&p, 0.8);
    assert!((f[0] - 2.0 / 3.0).abs() < 1e-12 && (f[1] - 1.0 / 3.0).abs() < 1e-12 && f[2] == 0.0);
    for top_p in [0.01, 0.5, 0.99] {
        assert_eq!(filter_top_p(&[0.0, 1.0, 0.0], top_p), vec![0.0, 1.0, 0.0]);
    }
    // a tie at the cut keeps the lower id
    let t = filter_top_p(&[0.25, 0.5, 0.25], 0.6);
    assert!((t[0] - 1.0 / 3.0).abs() < 1e-12 && (t[1] - 2.0 / 3.0).abs() < 1e-12 && t[2] == 0.0);
}

#[test]
fn full_step_unmasks_everything() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 10)).unwrap();
    let start = oracle.layout().all_masked(0.0);
    let mut rng = seeded(2);
    let next = sampler
        .step(&start, 1.0, &Conditioning::default(), &mut rng)
        .unwrap();
    assert_eq!(next.masked_count(), 0);
    assert_eq!(next.t, 1.0);
}

#[test]
fn half_step_unmasks_half() {
    let oracle = table(vec![(vec![0], 0.5), (vec![1], 0.5)], 2);
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 10)).unwrap();
    let start = oracle.layout().all_masked(0.0);
    let mut rng = seeded(3);
    let hits = (0..10_000)
        .filter(|_| {
            sampler
                .step(&start, 0.5, &Conditioning::default(), &mut rng)
                .unwrap()
                .masked_count()
                == 0
        })
        .count();
    let freq = hits as f64 / 10_000.0;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

#[test]
fn step_without_masks_only_advances_time() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 10)).unwrap();
    let ds = oracle.dataset();
    let state = CorruptionState::from_tokens(ds.layout(), ds.support()[3].clone(), 0.2).unwrap();
    let next = sampler
        .step(&state, 0.1, &Conditioning::default(), &mut seeded(0))
        .unwrap();
    assert_eq!(next.x_t, state.x_t);
    assert!((next.t - 0.3).abs() < 1e-15);
}

#[test]
fn single_step_residual_matches_closed_form() {
    let oracle = markov_oracle();
    let cfg = SamplerConfig {
        argmax_finalize: false,
        ..config(SamplerKind::Itm, 1)
    };
    let sampler = Sampler::new(&oracle, cfg.clone()).unwrap();
    let out = sampler
        .run_batch(50_000, |_| Conditioning::default())
        .unwrap();
    // one step of size 1 - 2 eps at rate 1 / (1 - eps)
    let eps = cfg.epsilon;
    let h = ((1.0 - 2.0 * eps) / (1.0 - eps)).min(1.0);
    let expected = 1.0 - h;
    let n = 50_000.0 * 4.0;
    let band = 4.0 * (expected * (1.0 - expected) / n).sqrt() + 1e-12;
    assert!((out.mean_residual_fraction() - expected).abs() <= band);
}

#[test]
fn chains_are_deterministic_and_never_remask() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 20)).unwrap();
    let a = sampler
        .sample_chain(&Conditioning::default(), &mut seeded(9))
        .unwrap();
    let b = sampler
        .sample_chain(&Conditioning::default(), &mut seeded(9))
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.snapshots.len(), 22);
    assert_eq!(a.snapshots[0].masked_count, 4);
    assert_eq!(a.snapshots.last().unwrap().masked_count, 0);
    for w in a.snapshots.windows(2) {
        assert!(w[1].masked_count <= w[0].masked_count);
        for l in 0..4 {
            if w[0].tokens[l] != 3 {
                assert_eq!(w[0].tokens[l], w[1].tokens[l]);
            }
        }
    }
}

#[test]
fn etm_and_itm_agree_with_the_oracle() {
    let oracle = markov_oracle();
    let itm = Sampler::new(&oracle, config(SamplerKind::Itm, 32)).unwrap();
    let etm = Sampler::new(&oracle, config(SamplerKind::Etm, 32)).unwrap();
    let a = itm.run_batch(2000, |_| Conditioning::default()).unwrap();
    let b = etm.run_batch(2000, |_| Conditioning::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_is_independent_of_thread_count() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 16)).unwrap();
    let many = sampler
        .run_batch(1500, |_| Conditioning::default())
        .unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let one = pool.install(|| {
        sampler
            .run_batch(1500, |_| Conditioning::default())
            .unwrap()
    });
    assert_eq!(many, one);
}

#[test]
fn argmax_finalize_clears_masks() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 4)).unwrap();
    let ds = oracle.dataset();
    let clean = CorruptionState::from_tokens(ds.layout(), ds.support()[5].clone(), 0.9).unwrap();
    assert_eq!(
        sampler
            .argmax_finalize(&clean, &Conditioning::default())
            .unwrap(),
        clean.x_t
    );
    let masked = ds.layout().all_masked(0.5);
    let out = sampler
        .argmax_finalize(&masked, &Conditioning::default())
        .unwrap();
    assert!(ds.layout().check_clean(&out).is_ok());
    // the marginal mode at position 0 is token 0 (initial 0.5)
    assert_eq!(out[0], 0);
}

#[test]
fn mask_curve_tracks_linear_schedule() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Itm, 100)).unwrap();
    let out = sampler
        .run_batch(5000, |_| Conditioning::default())
        .unwrap();
    let curve = out.mask_fraction_curve();
    assert_eq!(curve[0].1, 1.0);
    assert_eq!(curve.last().unwrap().1, 0.0);
    for &(t, frac) in &curve[1..curve.len() - 2] {
        assert!((frac - (1.0 - t)).abs() <= 0.03, "t={t} frac={frac}");
    }
}

#[test]
fn mgm_reveals_one_per_step_at_nfe_l() {
    let oracle = markov_oracle();
    let sampler = Sampler::new(&oracle, config(SamplerKind::Mgm, 4)).unwrap();
    let chain = sampler
        .sample_chain(&Conditioning::default(), &mut seeded(1))
        .unwrap();
    let counts: Vec<usize> = chain.snapshots.iter().map(|s| s.masked_count).collect();
    assert_eq!(counts, vec![4, 3, 2, 1, 0]);
}

#[test]
fn mgm_rejects_nfe_above_length() {
    let oracle = markov_oracle();
    assert!(matches!(
        Sampler::new(&oracle, config(SamplerKind::Mgm, 5)),
        Err(Error::Config { .. })
    ));
}

#[test]
fn mgm_greedy_recovers_point_mass() {
    let oracle = table(vec![(vec![2, 0, 1, 1, 0], 1.0)], 3);
    let cfg = SamplerConfig {
        temperature: 1e-6,
        ..config(SamplerKind::Mgm, 3)
    };
    let sampler = Sampler::new(&oracle, cfg).unwrap();
    for seed in 0..20 {
        let out = sampler
            .sample(&Conditioning::default(), &mut seeded(seed))
            .unwrap();
        assert_eq!(out.tokens.to_vec(), vec![2, 0, 1, 1, 0]);
    }
}

#[test]
fn gumbel_scales() {
    assert_eq!(gumbel_scale(GumbelMode::None, 2.0, 1, 4), 0.0);
    assert_eq!(gumbel_scale(GumbelMode::LinearAnneal, 2.0, 1, 4), 1.5);
    assert_eq!(gumbel_scale(GumbelMode::LinearAnneal, 2.0, 4, 4), 0.0);
    assert_eq!(gumbel_scale(GumbelMode::Constant, 2.0, 3, 4), 2.0);
    assert_eq!(gumbel_scale(GumbelMode::Warmup, 2.0, 2, 4), 2.0);
    assert_eq!(gumbel_scale(GumbelMode::Warmup, 2.0, 3, 4), 0.0);
}

#[test]
fn conditional_sampling_clamps_observed() {
    let layout = Layout::new(vec![
        crate::tokens::Segment {
            name: "x".into(),
            len: 2,
            vocab: VocabSpec::new(2).unwrap(),
        },
        crate::tokens::Segment {
            name: "y".into(),
            len: 2,
            vocab: VocabSpec::new(2).unwrap(),
        },
    ])
    .unwrap();
    let ds = crate::datasets::EnumerableDataset::new(crate::datasets::DatasetParts {
        kind: "table".into(),
        layout,
        grid: None,
        support: vec![
            TokenSeq::new(vec![0, 0, 0, 1]),
            TokenSeq::new(vec![0, 0, 1, 1]),
            TokenSeq::new(vec![1, 1, 1, 0]),
        ],
        probs: vec![0.25, 0.25, 0.5],
        classes: None,
        num_classes: 0,
        approximate: false,
    })
    .unwrap();
    let oracle = OraclePredictor::new(Arc::new(ds));
    let observed = Observed {
        segment: 0,
        tokens: TokenSeq::new(vec![0, 0]),
    };
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for seed in 0..2000 {
        let chain = conditional_sample(
            &oracle,
            observed.clone(),
            config(SamplerKind::Itm, 8),
            &mut seeded(seed),
        )
        .unwrap();
        for s in &chain.snapshots {
            assert_eq!(&s.tokens[..2], &[0, 0]);
        }
        *counts
            .entry(chain.final_tokens()[2..].to_vec())
            .or_default() += 1;
    }
    assert_eq!(counts.len(), 2);
    let f = counts[&vec![0, 1]] as f64 / 2000.0;
    assert!((f - 0.5).abs() < 0.05);

    let dirty = Observed {
        segment: 0,
        tokens: TokenSeq::new(vec![0, 2]),
    };
    assert!(matches!(
        conditional_sample(&oracle, dirty, config(SamplerKind::Itm, 8), &mut seeded(0)),
        Err(Error::Input(_))
    ));
}

#[test]
fn samples_file_round_trip() {
    let file = SampleFile {
        layout: Layout::single("x", 3, VocabSpec::new(4).unwrap()),
        grid: None,
        sampler: Some(config(SamplerKind::Mgm, 3)),
        samples: vec![TokenSeq::new(vec![0, 1, 2]), TokenSeq::new(vec![3, 3, 0])],
    };
    assert_eq!(SampleFile::parse(&file.to_text()).unwrap(), file);
    assert!(SampleFile::parse("{\"format\":\"other\"}\n").is_err());
    let truncated: String = file
        .to_text()
        .lines()
        .take(2)
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(SampleFile::parse(&truncated).is_err());
}

#[test]
fn config_rejects_bad_fields() {
    for cfg in [
        SamplerConfig {
            nfe: 0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            top_p: 0.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            top_p: 1.5,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            gumbel_temp: -1.0,
            ..SamplerConfig::default()
        },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
    assert_eq!(
        "linear".parse::<GumbelMode>().unwrap(),
        GumbelMode::LinearAnneal
    );
    assert_eq!(GumbelMode::LinearAnneal.to_string(), "linear_anneal");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mgm_counts_follow_the_schedule(
        nfe in 1usize..=4,
        seed in 0u64..1000,
        which in 0usize..6,
        gumbel in prop_oneof![Just(GumbelMode::None), Just(GumbelMode::LinearAnneal), Just(GumbelMode::Constant), Just(GumbelMode::Warmup)],
    ) {
        let oracle = markov_oracle();
        let schedule = Schedule::all_default()[which].clone();
        let cfg = SamplerConfig { schedule: schedule.clone(), gumbel_mode: gumbel, gumbel_temp: 1.0, ..config(SamplerKind::Mgm, nfe) };
        let sampler = Sampler::new(&oracle, cfg).unwrap();
        let chain = sampler.sample_chain(&Conditioning::default(), &mut seeded(seed)).unwrap();
        for (n, s) in chain.snapshots.iter().enumerate().skip(1) {
            let kappa = schedule.kappa(n as f64 / nfe as f64).unwrap();
            let expected = (kappa * 4.0 - 1e-9).ceil() as usize;
            prop_assert_eq!(4 - s.masked_count, expected);
        }
        // kept tokens never change
        for w in chain.snapshots.windows(2) {
            for l in 0..4 {
                if w[0].tokens[l] != 3 {
                    prop_assert_eq!(w[0].tokens[l], w[1].tokens[l]);
                }
            }
        }
    }
}
