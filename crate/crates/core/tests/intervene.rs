mod common;

use common::task_fixture;
use featbench::intervene::{
    dii_apply, run_intervened, CachedExample, Direction, InterventionKind, PreparedExample,
};
use featbench::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Largest violation of `a.f* = a.h_s` and of `f* - (a.f*)a = h_b - (a.h_b)a`.
fn projection_errors(h_b: &[f64], h_s: &[f64], a: &[f64], f: &[f64]) -> (f64, f64) {
    let along = (dot(a, f) - dot(a, h_s)).abs();
    let (af, ab) = (dot(a, f), dot(a, h_b));
    let off = f
        .iter()
        .zip(h_b)
        .zip(a)
        .map(|((fi, bi), ai)| ((fi - af * ai) - (bi - ab * ai)).abs())
        .fold(0.0, f64::max);
    (along, off)
}

#[test]
fn projection_identities_hold_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [8, 512] {
        let mut worst = (0.0f64, 0.0f64);
        for _ in 0..10_000 {
            let h_b: Vec<f32> = normal_vec(&mut rng, d).iter().map(|&x| x as f32).collect();
            let h_s: Vec<f32> = normal_vec(&mut rng, d).iter().map(|&x| x as f32).collect();
            let a = Direction::new(normal_vec(&mut rng, d)).unwrap();
            let f = dii_apply(&h_b, &h_s, &a).unwrap();
            let e = projection_errors(&to_f64(&h_b), &to_f64(&h_s), a.as_slice(), &to_f64(&f));
            worst = (worst.0.max(e.0), worst.1.max(e.1));
        }
        assert!(worst.0 < 1e-5 && worst.1 < 1e-5, "d={d}: {worst:?}");
    }
}

proptest! {
    #[test]
    fn projection_identities_proptest(
        rows in (1usize..24).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
        ))
    ) {
        let (h_b, h_s, a) = rows;
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let a = Direction::new(a).unwrap();
        prop_assert!((a.as_slice().iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        let f = dii_apply(&h_b, &h_s, &a).unwrap();
        let (along, off) = projection_errors(&h_b, &h_s, a.as_slice(), &f);
        prop_assert!(along < 1e-10 && off < 1e-10);
    }
}

/// Orthonormal basis by modified Gram-Schmidt on random vectors.
fn orthonormal_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Direction> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
        .into_iter()
        .map(|v| Direction::new(v).unwrap())
        .collect()
}

#[test]
fn composing_over_a_full_basis_is_vanilla() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [1, 2, 5, 16] {
        let basis = orthonormal_basis(d, &mut rng);
        let h_b = normal_vec(&mut rng, d);
        let h_s = normal_vec(&mut rng, d);
        let mut h = h_b.clone();
        for a in &basis {
            h = dii_apply(&h, &h_s, a).unwrap();
        }
        let vanilla = InterventionKind::Vanilla.replacement(&h_b, &h_s).unwrap();
        for (x, y) in h.iter().zip(&vanilla) {
            assert!((x - y).abs() < 1e-12, "d={d}");
        }
    }
}

fn label_lp(lp: &[f32], ex: &PreparedExample) -> (f64, f64) {
    (
        f64::from(lp[ex.base_label as usize]),
        f64::from(lp[ex.source_label as usize]),
    )
}

#[test]
fn orthogonal_direction_leaves_base_output() {
    let fx = task_fixture("agr_sv_num_pp", 16, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for e in fx.dataset.eval.iter().take(10) {
        let p = PreparedExample::new(&fx.tok, e).unwrap();
        let region = fx.template.label_region_index();
        let (site_b, site_s) = p.sites(0, region).unwrap();
        let hb = fx.model.forward(&p.base_ids).unwrap();
        let hs = fx.model.forward(&p.source_ids).unwrap();
        let delta: Vec<f64> = to_f64(hs.cache.get(0, site_s.position))
            .iter()
            .zip(to_f64(hb.cache.get(0, site_b.position)))
            .map(|(s, b)| s - b)
            .collect();
        let mut a = normal_vec(&mut rng, 16);
        let p_d = dot(&a, &delta) / dot(&delta, &delta);
        a.iter_mut().zip(&delta).for_each(|(x, di)| *x -= p_d * di);
        let kind = InterventionKind::Dii(Direction::new(a).unwrap());
        let got = run_intervened(&fx.model, &p, 0, region, &kind).unwrap();
        let want = label_lp(&hb.log_probs, &p);
        assert!((got.0 - want.0).abs() < 1e-5 && (got.1 - want.1).abs() < 1e-5);
    }
}

fn total_variation(lp: &[f32], lq: &[f32]) -> f64 {
    0.5 * lp
        .iter()
        .zip(lq)
        .map(|(&a, &b)| (f64::from(a).exp() - f64::from(b).exp()).abs())
        .sum::<f64>()
}

#[test]
fn vanilla_at_final_site_reproduces_source_distribution() {
    let fx = task_fixture("agr_sv_num_pp", 16, 2, 2);
    let last_layer = fx.model.n_layers() - 1;
    let last_region = fx.template.regions.len() - 1;
    for e in fx.dataset.eval.iter().take(20) {
        let p = PreparedExample::new(&fx.tok, e).unwrap();
        let c = CachedExample::new(&fx.model, p.clone()).unwrap();
        let (site_b, _) = p.sites(last_layer, last_region).unwrap();
        let (_, h_s) = c.activations(last_layer, last_region).unwrap();
        let lp = fx.model.resume(&c.base.cache, site_b, h_s).unwrap();
        assert!(total_variation(&lp, &c.source.log_probs) < 1e-5);
        let (yb, ys) = run_intervened(
            &fx.model,
            &p,
            last_layer,
            last_region,
            &InterventionKind::Vanilla,
        )
        .unwrap();
        let want = label_lp(&c.source.log_probs, &p);
        assert!((yb - want.0).abs() < 1e-5 && (ys - want.1).abs() < 1e-5);
    }
}

#[test]
fn degenerate_pair_is_a_no_op() {
    let fx = task_fixture("gss_subord", 16, 2, 3);
    let e = &fx.dataset.eval[0];
    let mut same = e.clone();
    same.source = same.base.clone();
    same.source_regions = same.base_regions.clone();
    let p = PreparedExample::new(&fx.tok, &same).unwrap();
    let base = label_lp(&fx.model.forward(&p.base_ids).unwrap().log_probs, &p);
    let a = Direction::new(vec![1.0; 16]).unwrap();
    for kind in [InterventionKind::Vanilla, InterventionKind::Dii(a)] {
        for layer in 0..2 {
            for region in 0..fx.template.regions.len() {
                let got = run_intervened(&fx.model, &p, layer, region, &kind).unwrap();
                assert_eq!(got, base);
            }
        }
    }
}

#[test]
fn cached_and_uncached_agree_and_repeat() {
    let fx = task_fixture("npi_any_subj-relc", 16, 2, 4);
    let a = Direction::new((0..16).map(|i| (i as f64).sin()).collect()).unwrap();
    let kind = InterventionKind::Dii(a);
    for e in fx.dataset.eval.iter().take(4) {
        let p = PreparedExample::new(&fx.tok, e).unwrap();
        let c = CachedExample::new(&fx.model, p.clone()).unwrap();
        for layer in 0..2 {
            for region in 0..fx.template.regions.len() {
                let u = run_intervened(&fx.model, &p, layer, region, &kind).unwrap();
                let v = c.intervene(&fx.model, layer, region, &kind).unwrap();
                assert_eq!(u, v);
                assert_eq!(
                    u,
                    run_intervened(&fx.model, &p, layer, region, &kind).unwrap()
                );
            }
        }
    }
}

#[test]
fn unknown_region_is_reported() {
    let fx = task_fixture("agr_gender", 8, 1, 5);
    let p = PreparedExample::new(&fx.tok, &fx.dataset.eval[0]).unwrap();
    let n = fx.template.regions.len();
    assert!(matches!(
        run_intervened(&fx.model, &p, 0, n, &InterventionKind::Vanilla),
        Err(Error::UnknownRegion(_))
    ));
    assert!(matches!(
        run_intervened(&fx.model, &p, 1, 0, &InterventionKind::Vanilla),
        Err(Error::SiteOutOfRange { .. })
    ));
}
