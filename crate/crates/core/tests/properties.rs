mod common;

use airseg_core::airmetrics::{branch_decompose, dice, fne, fpe, skeletonize_3d, tree_detected, branches_detected};
use airseg_core::inferpost::{connected_components, largest_component, threshold, Connectivity};
use airseg_core::prep::{clip_normalize, random_crop, split_scans, Slice25D};
use airseg_core::tensorcore::{dice_value, fusion_coefficients, kernels::same_ceil, Graph, ParamStore, Tensor};
use airseg_core::train::{AdamWState, TrainConfig};
use airseg_core::volio::{IntensityKind, MaskVolume, Volume};
use common::oracle::{component_count, has_full_cube, is_subset};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn mask_strategy(max_side: usize) -> impl Strategy<Value = MaskVolume> {
    (2..=max_side, 2..=max_side, 2..=max_side, 1u8..=6).prop_flat_map(|(nx, ny, nz, density)| {
        proptest::collection::vec(0u8..10, nx * ny * nz).prop_map(move |raw| {
            let data = raw.into_iter().map(|r| (r < density) as u8).collect();
            MaskVolume::new([nx, ny, nz], [1.0; 3], data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dice_is_harmonic_mean_of_complements(tp in 1u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000) {
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let (a, b) = (1.0 - fne(tp, fn_), 1.0 - fpe(tp, fp));
        let h = 2.0 * a * b / (a + b);
        prop_assert!((dice(tp, fp, fn_) - h).abs() <= 1e-12);
    }

    #[test]
    fn lr_schedule_is_multiplicative(a in 0i64..200, b in 0i64..200, decay in 0.5f64..0.999) {
        let cfg = TrainConfig { lr_decay: decay, ..TrainConfig::default() };
        let lhs = cfg.lr_at(a + b).unwrap() * cfg.lr0;
        let rhs = cfg.lr_at(a).unwrap() * cfg.lr_at(b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        prop_assert!(cfg.lr_at(a + 1).unwrap() < cfg.lr_at(a).unwrap());
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity(values in proptest::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        let mut opt = AdamWState::new(&store);
        for _ in 0..steps {
            store.zero_grad();
            store.get_mut(airseg_core::tensorcore::ParamId(0)).tensor.set_grad(vec![0.0; values.len()]).unwrap();
            opt.step(&mut store, 1e-2, 0.0).unwrap();
        }
        prop_assert_eq!(store.get(airseg_core::tensorcore::ParamId(0)).tensor.data(), &values[..]);
    }

    #[test]
    fn binary_dice_loss_is_symmetric(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64), eps in 0.0f64..2.0) {
        let p: Vec<f64> = bits.iter().map(|b| b.0 as u8 as f64).collect();
        let g: Vec<f64> = bits.iter().map(|b| b.1 as u8 as f64).collect();
        prop_assert_eq!(dice_value(&p, &g, eps), dice_value(&g, &p, eps));
    }

    #[test]
    fn fusion_coefficients_bounds_and_scaling(raw in proptest::collection::vec(-1.0f64..3.0, 1..5), eps in 1e-6f64..1e-2, k in 0.1f64..10.0) {
        let c = fusion_coefficients(&raw, eps);
        let s: f64 = c.iter().sum();
        let active: f64 = raw.iter().map(|r| r.max(0.0)).sum();
        prop_assert!(c.iter().all(|&v| v >= 0.0));
        prop_assert!(s <= 1.0 + 1e-15);
        prop_assert!(s >= active / (active + eps) - 1e-15);
        let scaled: Vec<f64> = raw.iter().map(|r| r * k).collect();
        let c2 = fusion_coefficients(&scaled, eps * k);
        for (a, b) in c.iter().zip(&c2) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_partitions_ids(n in 2usize..60, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("scan_{i:03}")).collect();
        let (train, val) = split_scans(&ids, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(val.len(), (fraction * n as f64 - 1e-9).ceil() as usize);
        let mut all: Vec<String> = train.iter().chain(&val).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(split_scans(&ids, fraction, seed).unwrap(), (train, val));
    }

    #[test]
    fn clip_normalize_is_monotone(mut hu in proptest::collection::vec(-3000.0f32..3000.0, 2..50)) {
        hu.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let v = Volume::new([hu.len(), 1, 1], [1.0; 3], hu, IntensityKind::Hounsfield).unwrap();
        let n = clip_normalize(&v).unwrap();
        prop_assert!(n.data().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(clip_normalize(&n).is_err());
    }

    #[test]
    fn random_crop_keeps_channels_and_label_aligned(h in 1usize..40, w in 1usize..40, size in 2usize..32, seed in any::<u64>()) {
        let n = h * w;
        let s = Slice25D {
            height: h,
            width: w,
            channels: (0..3 * n).map(|i| 1.0 + (i % n) as f32 + (i / n) as f32 * 10_000.0).collect(),
            label: (0..n).map(|i| (i % 3 == 0) as u8).collect(),
            scan_id: "s".into(),
            z: 0,
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let c = random_crop(&s, size, &mut rng);
        prop_assert_eq!((c.height, c.width), (size, size));
        for i in 0..size * size {
            let v0 = c.channel(0)[i];
            if v0 == 0.0 {
                prop_assert_eq!(c.label[i], 0);
                prop_assert_eq!(c.channel(2)[i], 0.0);
                continue;
            }
            let src = (v0 - 1.0) as usize;
            prop_assert_eq!(c.channel(1)[i], v0 + 10_000.0);
            prop_assert_eq!(c.channel(2)[i], v0 + 20_000.0);
            prop_assert_eq!(c.label[i], s.label[src]);
        }
    }

    #[test]
    fn same_ceil_output_size(len in 1usize..300, stride in 1usize..3) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&Tensor::zeros(vec![1, 1, len, len + 1]));
        let w = g.input(&Tensor::zeros(vec![1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, stride).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 1, len.div_ceil(stride), (len + 1).div_ceil(stride)][..]);
        prop_assert_eq!(same_ceil(len, 3, stride).0, len.div_ceil(stride));
        let p = g.maxpool2(x).unwrap();
        prop_assert_eq!(g.shape(p), &[1, 1, len.div_ceil(2), (len + 1).div_ceil(2)][..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn largest_component_subset_idempotent_single(m in mask_strategy(16)) {
        let l = largest_component(&m, Connectivity::TwentySix);
        prop_assert!(is_subset(&l, &m));
        prop_assert!(component_count(&l, true) <= 1);
        prop_assert_eq!(&largest_component(&l, Connectivity::TwentySix), &l);
        prop_assert_eq!(&largest_component(&m, Connectivity::TwentySix), &l);
        let field = connected_components(&m, Connectivity::TwentySix);
        prop_assert_eq!(field.count(), component_count(&m, true));
        prop_assert_eq!(field.sizes.iter().sum::<usize>(), m.count());
        prop_assert_eq!(l.count(), field.sizes.iter().copied().max().unwrap_or(0));
        prop_assert_eq!(connected_components(&m, Connectivity::Six).count(), component_count(&m, false));
    }

    #[test]
    fn threshold_is_monotone(values in proptest::collection::vec(0.0f32..1.0, 1..200), a in 0.0f32..1.0, b in 0.0f32..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let v = Volume::new([values.len(), 1, 1], [1.0; 3], values, IntensityKind::Normalized).unwrap();
        prop_assert!(is_subset(&threshold(&v, hi), &threshold(&v, lo)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn thinning_properties(m in mask_strategy(9)) {
        let s = skeletonize_3d(&m);
        let sm = s.to_mask();
        prop_assert!(is_subset(&sm, &m));
        prop_assert_eq!(component_count(&sm, true), component_count(&m, true));
        prop_assert!(!has_full_cube(&sm));
        prop_assert_eq!(skeletonize_3d(&sm).to_mask(), sm);
        let dec = branch_decompose(&s);
        let sum: f64 = dec.branches.iter().map(|b| b.length_mm).sum::<f64>() + dec.junction_internal_length;
        prop_assert!((sum - s.total_length()).abs() <= 1e-9 * s.total_length().max(1.0));
    }

    #[test]
    fn tree_metrics_monotone_under_voxel_addition(m in mask_strategy(9), extra in proptest::collection::vec(any::<u16>(), 1..40)) {
        let s = skeletonize_3d(&m);
        let dec = branch_decompose(&s);
        prop_assume!(s.total_length() > 0.0 && !dec.branches.is_empty());
        let mut pred = MaskVolume::zeros(m.dims(), m.spacing()).unwrap();
        let mut last = (0.0, 0.0);
        for e in extra {
            pred.set_index(e as usize % m.len(), true);
            let now = (tree_detected(&s, &pred).unwrap(), branches_detected(&dec.branches, &pred, 0.3).unwrap());
            prop_assert!(now.0 >= last.0 && now.1 >= last.1);
            prop_assert!((0.0..=1.0).contains(&now.0) && (0.0..=1.0).contains(&now.1));
            last = now;
        }
    }
}
