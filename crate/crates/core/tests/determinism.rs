use mobs_core::channels::{gabor_bank, GaborParams};
use mobs_core::observers::train_template;
use mobs_core::rng::rng_from;
use mobs_core::search::{lke_curve, response_map, LkeConfig, LkeEntry, StackedKernel};
use mobs_core::stats::{bootstrap_compare, BootstrapConfig, ObserverScores, PhantomPool};
use mobs_core::{BinaryMask, Dims, Volume};
use rand::Rng;

fn noise(dims: Dims, seed: u64) -> Volume<f64> {
    let mut rng = rng_from(seed, &[]);
    Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Everything the pipeline computes in parallel, as raw bits.
fn fingerprint() -> Vec<u64> {
    let bank = gabor_bank(&GaborParams::from_pixels_per_cycle(4, &[4.0, 8.0], 15)).unwrap();
    let d = Dims::d2(15, 15);
    let sp: Vec<_> = (0..60).map(|i| noise(d, 100 + i).map(|x| x + 0.1)).collect();
    let sa: Vec<_> = (0..60).map(|i| noise(d, 200 + i)).collect();
    let t = train_template(&bank, &sp, &sa, 0.0).unwrap();
    let mut bits: Vec<u64> = t.weights.iter().map(|w| w.to_bits()).collect();

    let kernel =
        StackedKernel::new(vec![(0.3, noise(d, 6)), (0.6, t.spatial_kernel().clone()), (0.8, noise(d, 7))]).unwrap();
    let pd = Dims::d3(48, 40, 12);
    let mask = BinaryMask::full(pd).eroded(4);
    let entries: Vec<LkeEntry> = (0..16)
        .map(|i| {
            let map = response_map(&noise(pd, 300 + i).cast::<f32>(), &kernel).unwrap();
            bits.extend(map.data().iter().step_by(97).map(|x| x.to_bits() as u64));
            let center = (i % 2 == 0).then_some([20, 20, 6]);
            LkeEntry::new(&format!("p{i}"), &map, &mask, center, [9, 9, 3]).unwrap()
        })
        .collect();
    let cfg = LkeConfig { iterations: 300, seed: 5, ..LkeConfig::default() };
    for p in lke_curve(&entries, &[1, 10, 500], &cfg).unwrap() {
        bits.extend([p.mean_auc.to_bits(), p.ci_low.to_bits(), p.ci_high.to_bits()]);
    }

    let ids: Vec<String> = (0..30).map(|i| format!("ph{i}")).collect();
    let mut rng = rng_from(9, &[]);
    let mut scores = || ObserverScores::Model(ids.iter().map(|id| (id.clone(), rng.random::<f64>())).collect());
    let (a, b) = (scores(), scores());
    let pool = PhantomPool { present: ids[..15].to_vec(), absent: ids[15..].to_vec() };
    let r =
        bootstrap_compare(&a, &b, &pool, &BootstrapConfig { iterations: 3000, seed: 3, ..Default::default() }).unwrap();
    bits.extend(r.deltas.iter().map(|x| x.to_bits()));
    bits
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let run = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(fingerprint);
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}
