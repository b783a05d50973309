use mobs_core::channels::{gabor_bank, GaborParams};
use mobs_core::cnn_post::{connected_components, largest_component_score, Connectivity};
use mobs_core::gaze::{overlap_percentage, time_spent_map, top_fraction_mask, Fixation};
use mobs_core::io::{load_volume, save_volume, VolumeKind};
use mobs_core::observers::train_template;
use mobs_core::phantom::{render_signal, InteriorSpec, SignalSpec};
use mobs_core::rng::rng_from;
use mobs_core::search::{response_map_as, StackedKernel};
use mobs_core::stats::{auc_empirical, two_sided_p};
use mobs_core::{crop, BinaryMask, CropSpec, Dims, Volume};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

mod common;
use common::flood_fill_labels;

fn noise(dims: Dims, seed: u64) -> Volume<f64> {
    let mut rng = rng_from(seed, &[]);
    Volume::from_fn(dims, |_, _, _| StandardNormal.sample(&mut rng))
}

fn random_mask(dims: Dims, density: f64, seed: u64) -> BinaryMask {
    let mut rng = rng_from(seed, &[]);
    BinaryMask::from_fn(dims, |_, _, _| rng.random::<f64>() < density)
}

fn max_abs(v: &Volume<f64>) -> f64 {
    v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn auc_ignores_increasing_transforms(
        sp in prop::collection::vec(-5.0f64..5.0, 1..40),
        sa in prop::collection::vec(-5.0f64..5.0, 1..40),
        a in 0.1f64..4.0,
        b in -3.0f64..3.0,
    ) {
        let base = auc_empirical(&sp, &sa).unwrap();
        let f = |x: &f64| (a * x + b).exp();
        let tsp: Vec<f64> = sp.iter().map(f).collect();
        let tsa: Vec<f64> = sa.iter().map(f).collect();
        prop_assert_eq!(base, auc_empirical(&tsp, &tsa).unwrap());
    }

    #[test]
    fn auc_swapped_classes_sum_to_one(
        sp in prop::collection::vec(-3i32..3, 1..30),
        sa in prop::collection::vec(-3i32..3, 1..30),
    ) {
        // small integer range forces many ties
        let sp: Vec<f64> = sp.into_iter().map(f64::from).collect();
        let sa: Vec<f64> = sa.into_iter().map(f64::from).collect();
        prop_assert_eq!(auc_empirical(&sp, &sa).unwrap() + auc_empirical(&sa, &sp).unwrap(), 1.0);
    }

    #[test]
    fn p_value_in_unit_interval(pct in 0.0f64..=100.0, n in 1usize..50_000) {
        let p = two_sided_p(pct, n);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn crop_of_crop_is_one_crop(
        seed in any::<u64>(),
        c1 in (6usize..14, 6usize..14, 3usize..5),
        off in (-2isize..=2, -2isize..=2, -1isize..=1),
    ) {
        let v = noise(Dims::d3(20, 20, 8), seed);
        let a = CropSpec::new([c1.0, c1.1, c1.2], [11, 11, 5]).unwrap();
        let inner = [(5 + off.0) as usize, (5 + off.1) as usize, (2 + off.2) as usize];
        let b = CropSpec::new(inner, [5, 5, 3]).unwrap();
        let outer = crop(&v, &a).unwrap();
        let twice = crop(&outer, &b).unwrap();
        let origin = a.origin_in(v.dims()).unwrap();
        let direct = CropSpec::new([origin[0] + inner[0], origin[1] + inner[1], origin[2] + inner[2]], [5, 5, 3]).unwrap();
        prop_assert!(twice == crop(&v, &direct).unwrap());
    }

    #[test]
    fn erosion_never_adds_voxels(seed in any::<u64>(), r in 0usize..4, floor in -0.5f64..0.5) {
        let v = noise(Dims::d3(16, 12, 6), seed);
        let lo = InteriorSpec { erosion_voxels: r, intensity_floor: Some(floor) }.mask(&v);
        let hi = InteriorSpec { erosion_voxels: r + 1, intensity_floor: Some(floor) }.mask(&v);
        prop_assert!(hi.data().iter().zip(lo.data()).all(|(&h, &l)| !h || l));
    }

    #[test]
    fn volume_file_round_trip(seed in any::<u64>(), nx in 1usize..9, ny in 1usize..9, nz in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let v = noise(Dims::d3(nx, ny, nz), seed).cast::<f32>().with_spacing([0.1, 0.2, 1.0]).unwrap();
        let path = dir.path().join("v.f32");
        save_volume(&v, &path, VolumeKind::Image).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert!(back == v);
    }

    #[test]
    fn response_map_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let d = Dims::d3(24, 20, 4);
        let x = noise(d, seed);
        let y = noise(d, seed ^ 1);
        let k = StackedKernel::new(vec![(0.5, noise(Dims::d2(7, 5), seed ^ 2)), (-1.0, noise(Dims::d2(7, 5), seed ^ 3)), (0.25, noise(Dims::d2(7, 5), seed ^ 4))]).unwrap();
        let combo = Volume::from_vec(d, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
        let lhs: Volume<f64> = response_map_as(&combo, &k).unwrap();
        let rx: Volume<f64> = response_map_as(&x, &k).unwrap();
        let ry: Volume<f64> = response_map_as(&y, &k).unwrap();
        let scale = max_abs(&lhs).max(1.0);
        for i in 0..d.len() {
            let rhs = a * rx.data()[i] + b * ry.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn response_map_commutes_with_circular_shift(seed in any::<u64>(), t in (0usize..16, 0usize..12, 0usize..5)) {
        let d = Dims::d3(16, 12, 5);
        let v = noise(d, seed);
        let k = StackedKernel::new(vec![(1.0, noise(Dims::d2(5, 5), seed ^ 9)), (0.3, noise(Dims::d2(5, 5), seed ^ 10)), (-0.7, noise(Dims::d2(5, 5), seed ^ 11))]).unwrap();
        let shifted = Volume::from_fn(d, |x, y, z| v.get((x + d.nx - t.0) % d.nx, (y + d.ny - t.1) % d.ny, (z + d.nz - t.2) % d.nz));
        let m: Volume<f64> = response_map_as(&v, &k).unwrap();
        let ms: Volume<f64> = response_map_as(&shifted, &k).unwrap();
        let scale = max_abs(&m);
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let want = m.get((x + d.nx - t.0) % d.nx, (y + d.ny - t.1) % d.ny, (z + d.nz - t.2) % d.nz);
                    prop_assert!((ms.get(x, y, z) - want).abs() <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn labeling_matches_flood_fill(seed in any::<u64>(), nx in 1usize..12, ny in 1usize..12, nz in 1usize..6, density in 0.1f64..0.7) {
        let m = random_mask(Dims::d3(nx, ny, nz), density, seed);
        for conn in [Connectivity::Eight, Connectivity::TwentySix] {
            let l = connected_components(&m, conn);
            let (labels, sizes) = flood_fill_labels(&m, conn);
            prop_assert_eq!(&l.labels, &labels);
            prop_assert_eq!(&l.sizes, &sizes);
        }
    }

    #[test]
    fn component_sizes_ignore_scan_direction(seed in any::<u64>(), density in 0.2f64..0.6) {
        let d = Dims::d3(10, 9, 4);
        let m = random_mask(d, density, seed);
        // reversed scan order, realized by flipping every axis
        let flipped = BinaryMask::from_fn(d, |x, y, z| m.get(d.nx - 1 - x, d.ny - 1 - y, d.nz - 1 - z));
        let transposed = BinaryMask::from_fn(Dims::d3(9, 10, 4), |x, y, z| m.get(y, x, z));
        for conn in [Connectivity::Eight, Connectivity::TwentySix] {
            let mut a = connected_components(&m, conn).sizes;
            let mut b = connected_components(&flipped, conn).sizes;
            let mut c = connected_components(&transposed, conn).sizes;
            a.sort_unstable();
            b.sort_unstable();
            c.sort_unstable();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }

    #[test]
    fn raising_threshold_never_grows_largest_component(seed in any::<u64>(), t in 0.0f64..0.95, dt in 0.0f64..0.3) {
        let d = Dims::d3(12, 12, 3);
        let mut rng = rng_from(seed, &[]);
        let p = Volume::<f32>::from_fn(d, |_, _, _| rng.random::<f32>());
        let conn = Connectivity::for_dims(d);
        let lo = largest_component_score(&connected_components(&mobs_core::cnn_post::binarize(&p, t).unwrap(), conn));
        let hi = largest_component_score(&connected_components(&mobs_core::cnn_post::binarize(&p, (t + dt).min(1.0)).unwrap(), conn));
        prop_assert!(hi <= lo);
    }

    #[test]
    fn overlap_grows_with_fraction(seed in any::<u64>()) {
        let d = Dims::d3(20, 20, 3);
        let resp = noise(d, seed);
        let interior = BinaryMask::from_fn(d, |x, y, _| (2..18).contains(&x) && (2..18).contains(&y));
        let mut rng = rng_from(seed, &[1]);
        let fixes: Vec<Fixation> = (0..15)
            .map(|_| Fixation {
                reader_id: "r".into(),
                phantom_id: "p".into(),
                x: rng.random_range(2.0..17.0),
                y: rng.random_range(2.0..17.0),
                slice: rng.random_range(0..3),
                onset_ms: 0.0,
                duration_ms: rng.random_range(50.0..400.0),
            })
            .collect();
        let refs: Vec<&Fixation> = fixes.iter().collect();
        let t = time_spent_map(&refs, d, [5, 5, 1]).unwrap();
        let mut last = 0.0;
        for f in [0.01, 0.05, 0.1, 0.2, 0.3, 0.45, 0.7, 1.0] {
            let m = top_fraction_mask(&resp, f, &interior).unwrap();
            let o = overlap_percentage(&t, &m, &interior).unwrap();
            prop_assert!(o + 1e-9 >= last);
            last = o;
        }
        prop_assert!((last - 100.0).abs() < 1e-9);
    }

    #[test]
    fn template_decisions_ignore_training_scale(seed in any::<u64>(), c in 0.05f64..20.0) {
        let bank = gabor_bank(&GaborParams::from_pixels_per_cycle(4, &[4.0, 8.0], 15)).unwrap();
        let d = Dims::d2(15, 15);
        let signal = Volume::from_fn(d, |x, y, _| if (x as f64 - 7.0).hypot(y as f64 - 7.0) <= 2.5 { 0.8 } else { 0.0 });
        let with_signal = |s: u64| {
            let n = noise(d, s);
            Volume::from_vec(d, n.data().iter().zip(signal.data()).map(|(a, b)| a + b).collect())
        };
        let sp: Vec<Volume<f64>> = (0..40).map(|i| with_signal(seed ^ (1000 + i))).collect();
        let sa: Vec<Volume<f64>> = (0..40).map(|i| noise(d, seed ^ (2000 + i))).collect();
        let scaled = |v: &[Volume<f64>]| v.iter().map(|x| x.map(|a| a * c)).collect::<Vec<_>>();
        let t1 = train_template(&bank, &sp, &sa, 0.0).unwrap();
        let t2 = train_template(&bank, &scaled(&sp), &scaled(&sa), 0.0).unwrap();
        let test_sp: Vec<f64> = (0..30).map(|i| with_signal(seed ^ (3000 + i))).map(|v| t1.score(&v).unwrap()).collect();
        let test_sa: Vec<f64> = (0..30).map(|i| noise(d, seed ^ (4000 + i))).map(|v| t1.score(&v).unwrap()).collect();
        let test_sp2: Vec<f64> = (0..30).map(|i| with_signal(seed ^ (3000 + i))).map(|v| t2.score(&v).unwrap()).collect();
        let test_sa2: Vec<f64> = (0..30).map(|i| noise(d, seed ^ (4000 + i))).map(|v| t2.score(&v).unwrap()).collect();
        prop_assert_eq!(auc_empirical(&test_sp, &test_sa).unwrap(), auc_empirical(&test_sp2, &test_sa2).unwrap());
    }
}

#[test]
fn sphere_rendering_is_axis_symmetric() {
    let sig = render_signal(&SignalSpec::microcalc(0.9, 1.0), [0.1, 0.1, 0.1]).unwrap();
    let d = sig.dims();
    assert_eq!(d.nx, d.ny);
    assert_eq!(d.nx, d.nz);
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let v = sig.get(x, y, z);
                assert_eq!(v, sig.get(y, x, z));
                assert_eq!(v, sig.get(z, y, x));
                assert_eq!(v, sig.get(x, z, y));
            }
        }
    }
}

#[test]
fn gabor_bank_is_a_pure_function() {
    let p = GaborParams::from_pixels_per_cycle(8, &[4.0, 16.0], 41);
    let a = gabor_bank(&p).unwrap();
    let b = gabor_bank(&p).unwrap();
    assert!(a.kernels().iter().zip(b.kernels()).all(|(x, y)| x == y));
}

#[test]
fn time_map_mass_matches_durations_away_from_borders() {
    let d = Dims::d3(60, 60, 9);
    let fixes: Vec<Fixation> = [(20.0, 22.0, 4, 300.0), (35.3, 40.8, 3, 120.0), (30.0, 30.0, 5, 90.0)]
        .iter()
        .map(|&(x, y, slice, duration_ms)| Fixation {
            reader_id: "r".into(),
            phantom_id: "p".into(),
            x,
            y,
            slice,
            onset_ms: 0.0,
            duration_ms,
        })
        .collect();
    let refs: Vec<&Fixation> = fixes.iter().collect();
    let t = time_spent_map(&refs, d, [15, 15, 3]).unwrap();
    let total: f64 = fixes.iter().map(|f| f.duration_ms).sum();
    assert!((t.sum() - total).abs() <= 1e-3 * total);
}
