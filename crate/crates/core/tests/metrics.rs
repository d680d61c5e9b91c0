mod common;

use fedleak_core::ingest::ImageShape;
use fedleak_core::metrics::{
    bootstrap_ci, cosine, iip, project_2d, rdlv, rdlv_from_ssim, ssim, Embedder, FeatureLayer, LeakageRecord,
    ModelEmbedder, PixelEmbedder, TsneConfig,
};
use fedleak_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

fn random_image(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    (0..shape.numel()).map(|_| rng.random::<f64>()).collect()
}

/// Direct per-window evaluation with an explicit 2-D kernel.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> f64 {
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let half = (size / 2) as f64;
    let mut k2 = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            k2[i * size + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let norm: f64 = k2.iter().sum();
    k2.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for ch in 0..c {
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let p = ((y0 + i) * w + x0 + j) * c + ch;
                        let k = k2[i * size + j];
                        ma += k * a[p];
                        mb += k * b[p];
                        saa += k * a[p] * a[p];
                        sbb += k * b[p] * b[p];
                        sab += k * a[p] * b[p];
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                vals.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn ssim_self_similarity_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shape in [ImageShape::new(16, 16, 1), ImageShape::new(12, 20, 3), ImageShape::new(8, 8, 1)] {
        let x = random_image(&mut rng, shape);
        assert!((ssim(&x, &x, shape).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ssim_constant_images_match_closed_form() {
    let shape = ImageShape::new(16, 16, 1);
    let zero = vec![0.0; 256];
    let one = vec![1.0; 256];
    let c1 = 0.01f64 * 0.01;
    // zero variance and covariance: the structure term is c2 / c2
    let expected = c1 / (1.0 + c1);
    assert!((ssim(&zero, &one, shape).unwrap() - expected).abs() < 1e-12);
    let (a, b) = (0.3, 0.7);
    let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&vec![a; 256], &vec![b; 256], shape).unwrap() - expected).abs() < 1e-12);
}

#[derive(Deserialize)]
struct Golden {
    name: String,
    shape: [usize; 3],
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
}

#[test]
fn ssim_matches_reference_golden_values() {
    let cases: Vec<Golden> = serde_json::from_str(include_str!("golden/ssim.json")).unwrap();
    assert_eq!(cases.len(), 4);
    for g in cases {
        let shape = ImageShape::new(g.shape[0], g.shape[1], g.shape[2]);
        let got = ssim(&g.a, &g.b, shape).unwrap();
        assert!((got - g.ssim).abs() < 1e-10, "{}: {got} vs {}", g.name, g.ssim);
    }
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in [ImageShape::new(8, 8, 1), ImageShape::new(13, 9, 3), ImageShape::new(16, 16, 1)] {
        let a = random_image(&mut rng, shape);
        let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
        let want = ssim_oracle(&a, &b, shape.height, shape.width, shape.channels);
        assert!((ssim(&a, &b, shape).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn ssim_rejects_shape_mismatch() {
    let shape = ImageShape::new(4, 4, 1);
    assert!(matches!(ssim(&[0.0; 16], &[0.0; 15], shape), Err(Error::Shape(_))));
}

#[test]
fn ssim_decreases_with_added_noise() {
    let shape = ImageShape::new(16, 16, 1);
    let targets = common::corpus(16, 3, 4).pool;
    let sigmas = [0.0, 0.02, 0.05, 0.1, 0.2, 0.4];
    let mut means = Vec::new();
    for &s in &sigmas {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in &targets.samples {
                let noisy: Vec<f64> = if s == 0.0 {
                    t.image.clone()
                } else {
                    let n = Normal::new(0.0, s).unwrap();
                    t.image.iter().map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect()
                };
                total += ssim(&t.image, &noisy, shape).unwrap();
            }
        }
        means.push(total);
    }
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn rdlv_examples() {
    let shape = ImageShape::new(12, 12, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_image(&mut rng, shape);
    let p = random_image(&mut rng, shape);
    assert_eq!(rdlv(&t, &p, &p, shape).unwrap(), 0.0);
    assert!((rdlv_from_ssim(1.0, 0.37).unwrap() - 1.703).abs() < 5e-4);
    assert!((rdlv_from_ssim(0.5, 0.4).unwrap() - 0.25).abs() < 1e-15);
    assert!(matches!(rdlv_from_ssim(0.5, 0.0), Err(Error::Undefined(_))));
}

/// Exhaustive nearest neighbor with lowest-index tie breaking.
fn iip_oracle(recon: &[Vec<f64>], pool: &[Vec<f64>], attacked: &[bool]) -> (f64, Vec<usize>) {
    let mut nearest = Vec::new();
    for r in recon {
        let mut best = 0;
        for j in 1..pool.len() {
            if cosine(r, &pool[j]) > cosine(r, &pool[best]) {
                best = j;
            }
        }
        nearest.push(best);
    }
    let mut hits: Vec<usize> = nearest.iter().copied().filter(|&j| attacked[j]).collect();
    hits.sort_unstable();
    hits.dedup();
    (hits.len() as f64 / recon.len() as f64, nearest)
}

fn gaussian_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| (0..d).map(|_| g.sample(rng)).collect()).collect()
}

#[test]
fn iip_perfect_recovery_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pool = gaussian_vectors(&mut rng, 12, 6);
    let attacked: Vec<bool> = (0..12).map(|i| i < 3).collect();
    let r = iip(&pool[..3], &pool, &attacked, 1).unwrap();
    assert_eq!(r.score, 1.0);
    assert_eq!(r.m, 3);
    assert!(r.matches.iter().all(|m| m.is_exact && (m.cosine - 1.0).abs() < 1e-12));
}

#[test]
fn iip_matches_exhaustive_oracle_on_seeded_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pool = gaussian_vectors(&mut rng, 20, 8);
    let recon = gaussian_vectors(&mut rng, 5, 8);
    let attacked: Vec<bool> = (0..20).map(|i| i % 4 == 0).collect();
    let (score, nearest) = iip_oracle(&recon, &pool, &attacked);
    let r = iip(&recon, &pool, &attacked, 1).unwrap();
    assert_eq!(r.score, score);
    assert_eq!(r.matches.iter().map(|m| m.matched).collect::<Vec<_>>(), nearest);
}

#[test]
fn iip_counts_unique_matches_only() {
    let pool = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let attacked = [true, true, false];
    let recon = vec![vec![2.0, 0.1], vec![3.0, -0.1], vec![-1.0, 0.05]];
    let r = iip(&recon, &pool, &attacked, 1).unwrap();
    assert_eq!((r.m, r.n), (1, 3));
    assert!((r.score - 1.0 / 3.0).abs() < 1e-15);
    // the third reconstruction's second-nearest image is attacked
    let r2 = iip(&recon, &pool, &attacked, 2).unwrap();
    assert_eq!(r2.m, 2);
}

#[test]
fn iip_errors() {
    let pool = vec![vec![1.0]];
    assert!(matches!(iip(&[], &pool, &[true], 1), Err(Error::Undefined(_))));
    assert!(matches!(iip(&pool, &[], &[], 1), Err(Error::Undefined(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>(), h in 4usize..14, w in 4usize..14, c in 1usize..4) {
        let shape = ImageShape::new(h, w, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, shape);
        let b = random_image(&mut rng, shape);
        let (x, y) = (ssim(&a, &b, shape).unwrap(), ssim(&b, &a, shape).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&x));
    }

    #[test]
    fn iip_agrees_with_oracle_and_ignores_scale(
        seed in any::<u64>(),
        n_pool in 1usize..100,
        n_recon in 1usize..10,
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = gaussian_vectors(&mut rng, n_pool, 4);
        let recon = gaussian_vectors(&mut rng, n_recon, 4);
        let attacked: Vec<bool> = (0..n_pool).map(|_| rng.random_bool(0.3)).collect();
        let r = iip(&recon, &pool, &attacked, 1).unwrap();
        let (score, nearest) = iip_oracle(&recon, &pool, &attacked);
        prop_assert_eq!(r.score, score);
        prop_assert_eq!(r.matches.iter().map(|m| m.matched).collect::<Vec<_>>(), nearest);
        prop_assert!((0.0..=1.0).contains(&r.score));
        let scaled = |v: &Vec<Vec<f64>>| v.iter().map(|x| x.iter().map(|e| e * scale).collect()).collect::<Vec<Vec<f64>>>();
        let rs = iip(&scaled(&recon), &scaled(&pool), &attacked, 1).unwrap();
        prop_assert_eq!(rs.score, r.score);
    }
}

#[test]
fn embedders_are_deterministic_and_sized() {
    let data = common::corpus(16, 2, 8).pool;
    let state = common::desk_model(1);
    let img = &data.samples[0].image;
    let embedders: Vec<Box<dyn Embedder>> = vec![
        Box::new(ModelEmbedder { state: state.clone(), layer: FeatureLayer::Pooled }),
        Box::new(ModelEmbedder { state, layer: FeatureLayer::Map }),
        Box::new(PixelEmbedder { shape: data.shape }),
    ];
    for e in &embedders {
        let a = e.embed(img).unwrap();
        let b = e.embed(img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), e.dim());
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        let batch = e.embed_batch(&[img, &data.samples[1].image]).unwrap();
        assert_eq!(batch[0], a);
    }
    assert_eq!(embedders[0].dim(), 16);
    assert_eq!(embedders[1].dim(), 16 * 2 * 2);
}

#[test]
fn projection_is_seeded_and_separates_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Normal::new(0.0, 0.5).unwrap();
    let points: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let centre = if i < 20 { 0.0 } else { 10.0 };
            (0..5).map(|_| centre + g.sample(&mut rng)).collect()
        })
        .collect();
    let cfg = TsneConfig { seed: 3, iterations: 400, ..Default::default() };
    let y = project_2d(&points, &cfg).unwrap();
    assert_eq!(y, project_2d(&points, &cfg).unwrap());
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
    for i in 0..40 {
        for j in i + 1..40 {
            if (i < 20) == (j < 20) {
                intra += dist(y[i], y[j]);
                ni += 1;
            } else {
                inter += dist(y[i], y[j]);
                nx += 1;
            }
        }
    }
    assert!(inter / nx as f64 > 2.0 * intra / ni as f64);
}

#[test]
fn projection_survives_duplicated_points() {
    let points = vec![vec![1.0, 2.0, 3.0]; 10];
    let y = project_2d(&points, &TsneConfig { iterations: 100, ..Default::default() }).unwrap();
    assert!(y.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    assert_eq!(project_2d(&points[..2], &TsneConfig::default()).unwrap().len(), 2);
}

#[test]
fn bootstrap_constant_sample_is_degenerate() {
    let c = 0.1234567;
    assert_eq!(bootstrap_ci(&[c; 17], 1000, 0.95, 4).unwrap(), (c, c));
    let v = [0.3, -0.2, 0.9, 0.1];
    assert_eq!(bootstrap_ci(&v, 1000, 0.95, 11).unwrap(), bootstrap_ci(&v, 1000, 0.95, 11).unwrap());
    assert!(bootstrap_ci(&[], 1000, 0.95, 0).is_err());
}

#[test]
fn bootstrap_covers_true_mean() {
    let normal = Normal::new(2.0, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut covered = 0;
    for trial in 0..200u64 {
        let xs: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
        let (lo, hi) = bootstrap_ci(&xs, 1000, 0.95, trial).unwrap();
        if lo <= 2.0 && 2.0 <= hi {
            covered += 1;
        }
    }
    assert!(covered >= 186, "coverage {covered}/200");
}

#[test]
fn leakage_record_interval_brackets_point() {
    let c = common::corpus(16, 3, 13);
    let shape = c.pool.shape;
    let originals: Vec<&[f64]> = c.pool.samples.iter().map(|s| s.image.as_slice()).collect();
    let prior = fedleak_core::ingest::compute_prior(&c.prior, shape, "prior").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recons: Vec<Vec<f64>> = c.pool.samples[..4]
        .iter()
        .map(|s| s.image.iter().map(|v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect())
        .collect();
    let rec = LeakageRecord::compute("c9", 3, 0.0, "none", &recons, &originals, &prior.image, shape, 1000, 0).unwrap();
    assert_eq!(rec.rdlv.len(), 4);
    assert!(rec.rdlv_lo <= rec.rdlv_mean && rec.rdlv_mean <= rec.rdlv_hi);
    for i in 0..4 {
        let want = (rec.ssim[i] - rec.ssim_prior[i]) / rec.ssim_prior[i];
        assert_eq!(rec.rdlv[i], want);
        assert!(rec.rdlv[i] > 0.0);
    }
}
