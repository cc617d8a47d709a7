use proptest::prelude::*;

use raci_core::data::{month_of_day, replicate_for_baseline, CalendarSpec, Matrix, SampleKey, Split};
use raci_core::evaluation::rmse;
use raci_core::params::ParamStore;
use raci_core::predictor::{Context, Mode, ModelKind, RaciConfig, Variant};
use raci_core::retrieval::{cosine, PoolInput, RetrievalPool};
use raci_core::rng;
use raci_core::synthetic::{build_benchmark, resimulate, response_functions, GeneratorConfig, RegimeParams};
use raci_core::temporal::{
    aggregate_daily_to_monthly, aggregate_monthly_to_yearly, propagate_monthly_to_daily, propagate_yearly_to_monthly,
    TemporalParams,
};
use raci_core::training::{init_run, FrozenContext, TrainConfig};

fn calendar_strategy() -> impl Strategy<Value = CalendarSpec> {
    prop::collection::vec(1usize..6, 12).prop_map(|lens| CalendarSpec {
        days_per_year: lens.iter().sum(),
        month_lengths: lens,
    })
}

fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    use rand::Rng;
    let mut r = rng::stream(seed, "test", "", &[rows as i64, cols as i64]);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #[test]
    fn month_of_day_is_monotone_and_covers_every_month(cal in calendar_strategy()) {
        let mut prev = 0;
        let mut seen = [false; 12];
        for d in 0..cal.days_per_year {
            let m = month_of_day(d, &cal).unwrap();
            prop_assert!(m >= prev);
            prev = m;
            seen[m] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert!(month_of_day(cal.days_per_year, &cal).is_err());
    }

    #[test]
    fn baseline_replication_is_recoverable(cal in calendar_strategy(), seed in any::<u64>()) {
        let ds = build_benchmark(&GeneratorConfig { calendar: cal.clone(), seed, ..GeneratorConfig::tiny(seed) }).unwrap();
        let s = &ds.samples[0];
        let x = replicate_for_baseline(s, &cal).unwrap();
        let dims = ds.dims();
        prop_assert_eq!(x.cols, dims.baseline());
        // every block can be read back, so distinct samples give distinct inputs
        for d in 0..cal.days_per_year {
            let row = x.row(d);
            let m = month_of_day(d, &cal).unwrap();
            prop_assert_eq!(&row[..dims.daily], s.x_daily.row(d));
            prop_assert_eq!(&row[dims.daily..dims.daily + dims.monthly], s.x_monthly.row(m));
            let rest = &row[dims.daily + dims.monthly..];
            prop_assert_eq!(&rest[..dims.yearly], &s.x_yearly[..]);
            prop_assert_eq!(&rest[dims.yearly..], &s.x_static[..]);
        }
    }

    #[test]
    fn generated_datasets_validate_and_resimulate_exactly(seed in any::<u64>(), voronoi in any::<bool>()) {
        let cfg = GeneratorConfig {
            rows: 2,
            cols: 3,
            noise_std: 0.0,
            regime_layout: if voronoi { raci_core::synthetic::RegimeLayout::Voronoi } else { raci_core::synthetic::RegimeLayout::Checkerboard },
            ..GeneratorConfig::tiny(seed)
        };
        let ds = build_benchmark(&cfg).unwrap();
        prop_assert!(raci_core::data::validate_dataset(&ds).is_empty());
        for s in &ds.samples {
            let y = resimulate(s, &cfg).unwrap();
            prop_assert!(y.iter().zip(&s.y).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn response_factors_are_monotone(
        q10 in 1.0f64..4.0,
        kappa in 0.5f64..30.0,
        w_thr in 0.0f64..1.0,
        k_s in 0.1f64..5.0,
        sigma_ph in 0.2f64..3.0,
        ph_opt in 4.0f64..8.0,
        w in 0.0f64..=1.0,
        t in -20.0f64..35.0,
    ) {
        let reg = RegimeParams { q10, kappa, w_thr, k_s, sigma_ph, ph_opt, ..RegimeParams::default() };
        let f = |t: f64, w: f64, som: f64, ph: f64| response_functions(t, w, som, &RegimeParams { ph, ..reg.clone() }).unwrap();
        let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        for pair in grid.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            // temperature over [-20, 40]
            prop_assert!(f(-20.0 + 60.0 * a, w, 1.0, ph_opt).f_mst <= f(-20.0 + 60.0 * b, w, 1.0, ph_opt).f_mst);
            prop_assert!(f(t, a, 1.0, ph_opt).f_mst <= f(t, b, 1.0, ph_opt).f_mst);
            prop_assert!(f(t, a, 1.0, ph_opt).f_rx <= f(t, b, 1.0, ph_opt).f_rx);
            prop_assert!(f(t, w, 10.0 * a, ph_opt).f_som <= f(t, w, 10.0 * b, ph_opt).f_som);
            // pH over [3, 9]: rising below the optimum, falling above it
            let (pa, pb) = (3.0 + 6.0 * a, 3.0 + 6.0 * b);
            let (ya, yb) = (f(t, w, 1.0, pa).f_ph, f(t, w, 1.0, pb).f_ph);
            if pb <= ph_opt {
                prop_assert!(ya <= yb);
            } else if pa >= ph_opt {
                prop_assert!(ya >= yb);
            }
        }
        let at_opt = f(t, w, 1.0, ph_opt).f_ph;
        prop_assert_eq!(at_opt, 1.0);
    }

    #[test]
    fn attention_weights_form_simplices_and_gates_are_nonnegative(seed in any::<u64>(), h in 1usize..6, cal in calendar_strategy()) {
        let mut p = ParamStore::new();
        let mut r = rng::stream(seed, "init", "", &[]);
        let tp = TemporalParams::init(&mut p, h, &mut r);
        let hd = random_matrix(cal.days_per_year, h, seed, 3.0);
        let pm = random_matrix(12, h, seed ^ 1, 3.0);
        let (hm, alpha) = aggregate_daily_to_monthly(&p, &tp, &hd, &pm, &cal).unwrap();
        for (g, len) in alpha.iter().zip(&cal.month_lengths) {
            prop_assert_eq!(g.len(), *len);
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(g.iter().all(|&a| a >= 0.0));
        }
        let pr: Vec<f64> = random_matrix(1, h, seed ^ 2, 3.0).data;
        let (hy, a2) = aggregate_monthly_to_yearly(&p, &tp, &hm, &pr).unwrap();
        prop_assert!((a2.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let (hmt, b1) = propagate_yearly_to_monthly(&p, &tp, &hy, &hm).unwrap();
        let (_, b2) = propagate_monthly_to_daily(&p, &tp, &hmt, &hd, &cal).unwrap();
        prop_assert!(b1.iter().chain(&b2).all(|&b| b >= 0.0));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-1e3f64..1e3, 1..8), b in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let n = a.len().min(b.len());
        let c = cosine(&a[..n], &b[..n]);
        prop_assert!((-1.0..=1.0).contains(&c));
        let self_c = cosine(&a, &a);
        if a.iter().any(|&v| v != 0.0) {
            prop_assert!((self_c - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(self_c, 0.0);
        }
    }

    #[test]
    fn raising_tau_only_removes_candidates(seed in any::<u64>(), t1 in -0.99f64..1.0, t2 in -0.99f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let h = 4;
        let pool_at = |tau: f64| {
            let inputs = (0..6)
                .map(|i| PoolInput {
                    key: SampleKey::new(format!("s{i}"), 2005),
                    h_yearly: random_matrix(1, h, seed.wrapping_add(i), 1.0).data,
                    y: random_matrix(1, 5, seed ^ i, 1.0).data,
                    mask: vec![true; 5],
                })
                .collect();
            RetrievalPool::fit(inputs, 5, 2, tau, "fp".into()).unwrap()
        };
        let q = random_matrix(1, h, seed ^ 99, 1.0).data;
        let target = SampleKey::new("t", 2007);
        let loose = pool_at(lo).screen(&q, &target);
        let strict = pool_at(hi).screen(&q, &target);
        prop_assert_eq!(&loose.similarities, &strict.similarities);
        for c in &strict.candidates {
            prop_assert!(c.similarity > hi);
            prop_assert!(loose.candidates.iter().any(|d| d.entry == c.entry));
        }
    }

    #[test]
    fn rmse_ignores_order(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, any::<bool>()), 1..40), shift in 0usize..40) {
        prop_assume!(v.iter().any(|x| x.2));
        let pred: Vec<f64> = v.iter().map(|x| x.0).collect();
        let obs: Vec<f64> = v.iter().map(|x| x.1).collect();
        let mask: Vec<bool> = v.iter().map(|x| x.2).collect();
        let a = rmse(&pred, &obs, &mask).unwrap();
        let k = shift % v.len();
        let rot = |x: &[f64]| [&x[k..], &x[..k]].concat();
        let mrot = [&mask[k..], &mask[..k]].concat();
        let mut rev = v.clone();
        rev.reverse();
        let b = rmse(&rot(&pred), &rot(&obs), &mrot).unwrap();
        let c = rmse(
            &rev.iter().map(|x| x.0).collect::<Vec<_>>(),
            &rev.iter().map(|x| x.1).collect::<Vec<_>>(),
            &rev.iter().map(|x| x.2).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!((a - c).abs() <= 1e-12 * a.max(1.0));
    }
}

#[test]
fn production_stays_above_minus_three_sigma() {
    let cfg = GeneratorConfig {
        rows: 4,
        cols: 4,
        seed: 8,
        ..Default::default()
    };
    let ds = build_benchmark(&cfg).unwrap();
    let ys: Vec<f64> = ds.samples.iter().flat_map(|s| s.y.iter().copied()).collect();
    let below = ys.iter().filter(|&&y| y < -3.0 * cfg.noise_std).count();
    // a Gaussian tail of 0.00135 per point; allow twice that
    assert!((below as f64) < 0.0027 * ys.len() as f64, "{below} of {}", ys.len());
}

#[test]
fn temperature_is_spatially_smooth() {
    for seed in 0..3 {
        let cfg = GeneratorConfig {
            rows: 10,
            cols: 10,
            seed,
            ..Default::default()
        };
        let (temp, _) = raci_core::synthetic::driver_fields(&cfg, 2003);
        let idx = |r: usize, c: usize| r * cfg.cols + c;
        let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0, 0.0, 0);
        for r1 in 0..10usize {
            for c1 in 0..10usize {
                for r2 in 0..10 {
                    for c2 in 0..10 {
                        let steps = r1.abs_diff(r2).max(c1.abs_diff(c2));
                        let (a, b) = (&temp[idx(r1, c1)], &temp[idx(r2, c2)]);
                        if steps == 1 {
                            near += raci_core::evaluation::pearson(a, b).0;
                            n_near += 1;
                        } else if steps >= 5 {
                            far += raci_core::evaluation::pearson(a, b).0;
                            n_far += 1;
                        }
                    }
                }
            }
        }
        let (near, far) = (near / n_near as f64, far / n_far as f64);
        assert!(near > far, "seed {seed}: adjacent {near} vs distant {far}");
    }
}

fn tiny_setup(cfg: RaciConfig) -> (raci_core::data::Dataset, raci_core::training::RunState) {
    let ds = build_benchmark(&GeneratorConfig {
        rows: 2,
        cols: 3,
        ..GeneratorConfig::tiny(6)
    })
    .unwrap();
    let run = init_run(&ds, ModelKind::Raci, cfg, TrainConfig::new(1, 2)).unwrap();
    (ds, run)
}

fn small_config() -> RaciConfig {
    RaciConfig {
        h: 5,
        k_pca: 2,
        dropout_p: 0.0,
        ..Default::default()
    }
}

#[test]
fn no_yearly_variant_equals_full_model_without_a_pool() {
    let (ds, run) = tiny_setup(small_config());
    let frozen = FrozenContext::build(&run.model, &ds, &ds, &[2000, 2001]).unwrap();
    let mut no_yearly = run.model.clone();
    no_yearly.config = no_yearly.config.with_variant(Variant::NoYearly);
    let without_pool = Context {
        pool: None,
        ..frozen.ctx()
    };
    for s in ds.split_samples(Split::Train).unwrap() {
        let a = no_yearly.predict(s, &frozen.ctx(), &mut Mode::Eval).unwrap();
        let b = run.model.predict(s, &without_pool, &mut Mode::Eval).unwrap();
        let c = no_yearly.predict(s, &without_pool, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn fallback_equals_no_yearly_variant() {
    let (ds, run) = tiny_setup(small_config());
    let mut frozen = FrozenContext::build(&run.model, &ds, &ds, &[2000, 2001]).unwrap();
    let max_sim = ds
        .split_samples(Split::Train)
        .unwrap()
        .iter()
        .flat_map(|s| {
            frozen
                .pool
                .screen(&run.model.yearly_embedding(s).unwrap(), &s.key())
                .similarities
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max_sim < 1.0);
    frozen.pool.tau = max_sim.max(-0.99) + (1.0 - max_sim) / 2.0;
    let mut no_yearly = run.model.clone();
    no_yearly.config = no_yearly.config.with_variant(Variant::NoYearly);
    for s in ds.split_samples(Split::Train).unwrap() {
        let (a, diag) = run.model.forward(s, &frozen.ctx(), &mut Mode::Eval).unwrap();
        assert!(diag.unwrap().retrieval.unwrap().fallback);
        let b = no_yearly.predict(s, &frozen.ctx(), &mut Mode::Eval).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn no_both_variant_composes_the_two_single_ablations() {
    let (ds, run) = tiny_setup(small_config());
    let frozen = FrozenContext::build(&run.model, &ds, &ds, &[2000, 2001]).unwrap();
    let variant = |v: Variant| {
        let mut m = run.model.clone();
        m.config = m.config.with_variant(v);
        m
    };
    let both = variant(Variant::NoBoth);
    let no_monthly = variant(Variant::NoMonthly);
    let bare = Context::default();
    for s in ds.split_samples(Split::Train).unwrap() {
        let a = both.predict(s, &frozen.ctx(), &mut Mode::Eval).unwrap();
        // dropping the pool from -Monthly, or every context from Full, gives -Both
        let b = no_monthly
            .predict(s, &Context { pool: None, ..frozen.ctx() }, &mut Mode::Eval)
            .unwrap();
        let c = run.model.predict(s, &bare, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
