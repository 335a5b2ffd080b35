use aerocon_core::augment::{apply, make_controlled_views, rotate, sample_params, Image, Policy};
use aerocon_core::config::{AugmentConfig, KMeansMetric};
use aerocon_core::contrast::{local_kmeans_traced, KeyQueue};
use aerocon_core::data::{
    extract_pre, generate_mosaic, subsample_labels, LabeledDataset, MosaicSpec, PatchOrigin, Split,
};
use aerocon_core::model::l2_normalize_rows;
use aerocon_core::numerics::Tensor;
use aerocon_core::rng::{stream, Tag};
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> Image {
    let data = (0..3 * h * w).map(|i| ((i as u64 * 7919 + seed) % 1000) as f64 / 999.0).collect();
    Image::new(h, w, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_holds_the_stream_tail(capacity in 1usize..20, dim in 1usize..4, sizes in prop::collection::vec(1usize..20, 0..10)) {
        let mut q = KeyQueue::new(capacity, dim).unwrap();
        let mut all = Vec::new();
        let mut next = 0.0;
        for b in sizes {
            let b = b.min(capacity);
            let keys = l2_normalize_rows(&Tensor::from_fn([b, dim], |_| { next += 1.0; next })).unwrap().0;
            q.push(&keys).unwrap();
            all.extend(keys.data().chunks_exact(dim).map(<[f64]>::to_vec));
        }
        let tail = &all[all.len().saturating_sub(capacity)..];
        let got: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
        prop_assert_eq!(got, tail.to_vec());
    }

    #[test]
    fn kmeans_inertia_never_rises(seed in any::<u64>(), n in 4usize..40, d in 2usize..8, k in 1usize..6) {
        let k = k.min(n);
        let raw = Tensor::from_fn([n, d], {
            let mut s = seed;
            move |_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5 }
        });
        let g = l2_normalize_rows(&raw).unwrap().0;
        let mut trace = Vec::new();
        let res = local_kmeans_traced(&g, k, &mut stream(seed, 0, 0, Tag::KMeansFirst), 20, KMeansMetric::Spherical, |s| trace.push(s.inertia)).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert_eq!(res.assignment.len(), n);
        prop_assert!(res.assignment.iter().all(|&a| a < k));
    }

    #[test]
    fn augmented_views_stay_in_range_and_in_bounds(seed in any::<u64>(), h in 16usize..28, w in 16usize..28) {
        let cfg = AugmentConfig { crop_size: 16, ..AugmentConfig::default() };
        let img = image(h, w, seed);
        let mut rng = stream(seed, 0, 0, Tag::Views);
        let p = sample_params(&mut rng, Policy::ALL, &cfg, h, w).unwrap();
        prop_assert!(p.crop_top + 16 <= h && p.crop_left + 16 <= w);
        prop_assert!(p.rotation_k < 4);
        let out = apply(&img, &p).unwrap();
        prop_assert_eq!((out.height(), out.width()), (16, 16));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn controlled_views_share_what_they_should(seed in any::<u64>()) {
        let cfg = AugmentConfig { crop_size: 16, ..AugmentConfig::default() };
        let v = make_controlled_views(&image(20, 20, seed), &mut stream(seed, 0, 0, Tag::Views), &cfg).unwrap();
        prop_assert!(v.first_params.same_color(&v.positive_params));
        prop_assert_ne!(v.first_params.rotation_k, v.positive_params.rotation_k);
        prop_assert_eq!(v.second_params.rotation_k, v.positive_params.rotation_k);
    }

    #[test]
    fn four_rotations_are_identity(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let img = image(h, w, seed);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, 1);
        }
        prop_assert_eq!(r, img);
    }

    #[test]
    fn pre_extraction_count_and_bounds(seed in any::<u64>(), per in 1usize..6, extra in 0usize..6, patch in 8usize..40) {
        let spec = MosaicSpec {
            height: 48,
            width: 48,
            animals: (seed % 3) as usize,
            animals_beneath_trees: 0,
            trees: 1,
            grass_patches: 1,
            tire_marks: 0,
            dead_trunks: 1,
            animal_len: (4, 8),
        };
        let mosaics: Vec<_> = (0..3u64).map(|i| generate_mosaic(&spec, &mut stream(seed, 0, i, Tag::Mosaic)).unwrap()).collect();
        let set = extract_pre(&mosaics, patch, per, extra, &mut stream(seed, 0, 0, Tag::ExtractPre)).unwrap();
        let expected: usize = mosaics.iter().map(|m| per + if m.boxes.is_empty() { 0 } else { extra }).sum();
        prop_assert_eq!(set.len(), expected);
        for o in &set.origins {
            prop_assert!(o.top + patch <= 48 && o.left + patch <= 48);
        }
    }

    #[test]
    fn subsampling_is_stratified(seed in any::<u64>(), bg in 1usize..80, fg in 1usize..20, fraction in 0.05f64..=1.0) {
        prop_assume!((fraction * fg as f64).floor() >= 1.0);
        let mut train = Split::default();
        for i in 0..bg + fg {
            train.patches.push(Image::filled(1, 1, [0.0; 3]));
            train.labels.push(u8::from(i % (bg + fg) >= bg));
            train.origins.push(PatchOrigin { mosaic: 0, top: i, left: 0 });
        }
        let data = LabeledDataset { train, val: Split::default(), test: Split::default(), mosaics: Default::default() };
        let sub = subsample_labels(&data, fraction, &mut stream(seed, 0, 0, Tag::Subsample)).unwrap();
        let (b, f) = sub.train.class_counts();
        prop_assert_eq!(b, (fraction * bg as f64).floor() as usize);
        prop_assert_eq!(f, (fraction * fg as f64).floor() as usize);
        prop_assert!(sub.train.origins.windows(2).all(|w| w[0].top < w[1].top));
    }
}
