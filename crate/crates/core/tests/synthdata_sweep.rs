use more_core::synthdata::{generate_sample, generate_split, SynthConfig};
use std::collections::HashSet;

#[test]
fn thousand_seed_sweep() {
    let cfg = SynthConfig::default();
    let samples = generate_split(0, 1000, &cfg).unwrap();
    let total = (cfg.height * cfg.width) as f64;
    let mut present = [0usize; 3];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for s in &samples {
        let areas = s.class_areas(3);
        for c in 1..=3 {
            assert_eq!(s.labels[c - 1], areas[c] > 0, "seed {}", s.seed);
            if areas[c] > 0 {
                let f = areas[c] as f64 / total;
                assert!((0.04..=0.40).contains(&f), "seed {} class {c} covers {f}", s.seed);
                lo = lo.min(f);
                hi = hi.max(f);
                present[c - 1] += 1;
            }
        }
        assert!(s.labels.iter().any(|&b| b));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    println!("shape area range [{lo:.4}, {hi:.4}], presence {present:?} / 1000");
    for (c, &n) in present.iter().enumerate() {
        let frac = n as f64 / 1000.0;
        assert!((0.40..=0.80).contains(&frac), "class {} present in {frac}", c + 1);
    }
}

#[test]
fn disjoint_seed_ranges_share_no_images() {
    let cfg = SynthConfig::default();
    let train = generate_split(0, 200, &cfg).unwrap();
    let val = generate_split(1_000_000, 200, &cfg).unwrap();
    let key = |s: &more_core::synthdata::SyntheticSample| {
        s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let seen: HashSet<Vec<u64>> = train.iter().map(key).collect();
    assert!(val.iter().all(|s| !seen.contains(&key(s))));
}

#[test]
fn flipped_samples_stay_consistent() {
    let cfg = SynthConfig::default();
    for seed in 0..50 {
        let f = generate_sample(seed, &cfg).unwrap().flip_horizontal();
        let areas = f.class_areas(3);
        for c in 1..=3 {
            assert_eq!(f.labels[c - 1], areas[c] > 0);
        }
    }
}
