//! Invariants checked on random inputs.

mod common;

use common::*;
use proptest::prelude::*;
use sipl::data::{
    decode_volume, dsc, encode_volume, generate_phantom, mean_dsc, AbsentClass, LabelVolume, PhantomSpec, ShapeKind,
    VolumeData,
};
use sipl::experiment::ExperimentConfig;
use sipl::ipl::{fuse_prototypes, instance_proposals, label_map, predict_masks, Pooling};
use sipl::losses::{aux_loss, seg_loss, LossConfig};
use sipl::numerics::{Graph, InitSpec, Interpolation, Mlp, ParamStore, Parameter, Tensor};
use sipl::smg::{aggregate_masks, overlap_ratios, select_active_clusters, tau_schedule, OverlapOptions};

fn eval(f: impl FnOnce(&mut Graph) -> sipl::Result<sipl::numerics::Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

fn labels(r: &mut rand_chacha::ChaCha8Rng, extents: [usize; 3], k: u8) -> LabelVolume {
    let n = extents.iter().product();
    LabelVolume::new(extents, (0..n).map(|_| rand::Rng::random_range(r, 0..=k)).collect()).unwrap()
}

fn opts() -> OverlapOptions {
    OverlapOptions {
        foreground_only: false,
        resize: Interpolation::Trilinear,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5, axis in 0usize..3) {
        let x = rand_tensor(&mut rng(seed), &[a, b, c], -30.0, 30.0);
        let y = eval(|g| { let v = g.constant(x.clone()); g.softmax(v, axis) });
        let dims = [a, b, c];
        let stride: usize = dims[axis + 1..].iter().product();
        for base in 0..a * b * c {
            if !(base / stride).is_multiple_of(dims[axis]) { continue; }
            let s: f64 = (0..dims[axis]).map(|i| y.data()[base + i * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_rows_are_distributions(seed in any::<u64>(), p in 1usize..40, n in 1usize..8, k in 1usize..4) {
        let mut r = rng(seed);
        let m_pc = rand_tensor(&mut r, &[p, n], -5.0, 5.0);
        let m_cc = rand_tensor(&mut r, &[n, k + 1], -5.0, 5.0);
        let m = eval(|g| { let a = g.constant(m_pc); let b = g.constant(m_cc); aggregate_masks(g, a, b) });
        for row in 0..p {
            prop_assert!(m.row(row).iter().all(|&v| v >= 0.0));
            prop_assert!((m.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_is_a_fraction_and_filtering_keeps_a_cluster(
        seed in any::<u64>(), n in 1usize..6, k in 1usize..4, tau in 0.0f64..=1.0, fg in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let [gx, gy, gz] = grids(8)[seed as usize % grids(8).len()];
        let prev = rand_tensor(&mut r, &[2, 2, 2, k + 1], 0.0, 1.0);
        let cur = rand_tensor(&mut r, &[gx, gy, gz, n], 0.0, 1.0);
        let o = OverlapOptions { foreground_only: fg, ..opts() };
        for ratio in overlap_ratios(&prev, &cur, o).unwrap() {
            prop_assert!((0.0..=1.0).contains(&ratio));
        }
        let active = select_active_clusters(&prev, &cur, tau, o).unwrap();
        prop_assert!(active.iter().any(|&a| a));
    }

    #[test]
    fn proposals_ignore_mask_scale(seed in any::<u64>(), c in 0.01f64..100.0, k in 1usize..4) {
        let mut r = rng(seed);
        let f = rand_tensor(&mut r, &[2, 2, 2, 3], -1.0, 1.0);
        let m = rand_tensor(&mut r, &[4, 4, 4, k + 1], 0.05, 1.0);
        let run = |m: Tensor| eval(|g| {
            let (fv, mv) = (g.constant(f.clone()), g.constant(m));
            instance_proposals(g, fv, mv, Pooling::MassNormalized, Interpolation::Trilinear)
        });
        let a = run(m.clone());
        let b = run(m.map(|v| v * c));
        prop_assert!(max_diff(a.data(), b.data()) < 1e-10);
    }

    #[test]
    fn fusion_does_not_mix_classes(seed in any::<u64>(), k in 2usize..5, row in 0usize..5) {
        let row = row % k;
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "fusion", &[6, 3, 2], seed);
        let mut r = rng(seed);
        let inst = rand_tensor(&mut r, &[k, 3], -1.0, 1.0);
        let common = rand_tensor(&mut r, &[k, 3], -1.0, 1.0);
        let mut bumped = inst.clone();
        bumped.data_mut()[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v += 0.7);
        let run = |i: Tensor| {
            let mut g = Graph::new();
            g.bind(&store);
            let (iv, cv) = (g.constant(i), g.constant(common.clone()));
            let out = fuse_prototypes(&mut g, &mlp, iv, cv).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(inst), run(bumped));
        for j in (0..k).filter(|&j| j != row) {
            prop_assert_eq!(a.row(j), b.row(j));
        }
    }

    #[test]
    fn predictions_follow_prototype_order(seed in any::<u64>(), k in 1usize..5, shift in 0usize..5) {
        let mut r = rng(seed);
        let f = rand_tensor(&mut r, &[2, 3, 1, 4], -1.0, 1.0);
        let protos = rand_tensor(&mut r, &[k, 4], -1.0, 1.0);
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| protos.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows);
        let run = |p: Tensor| eval(|g| { let (a, b) = (g.constant(f.clone()), g.constant(p)); predict_masks(g, a, b) });
        let (a, b) = (run(protos), run(permuted));
        for px in 0..6 {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(b.row(px)[j], a.row(px)[i]);
            }
        }
    }

    #[test]
    fn label_map_is_in_range_and_deterministic(seed in any::<u64>(), k in 1usize..5, t in 0.0f64..1.0) {
        let y = rand_tensor(&mut rng(seed), &[12, k], 0.0, 1.0);
        let a = label_map(&y, [2, 3, 2], t).unwrap();
        prop_assert_eq!(&a, &label_map(&y, [2, 3, 2], t).unwrap());
        prop_assert!(a.max_label() as usize <= k);
        for (px, &l) in a.data.iter().enumerate() {
            let row = y.row(px);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if l == 0 {
                prop_assert!(best <= t);
            } else {
                prop_assert_eq!(row[l as usize - 1], best);
                prop_assert!(row[..l as usize - 1].iter().all(|&v| v < best));
            }
        }
        prop_assert!(label_map(&y, [2, 3, 2], 1.0).unwrap().data.iter().all(|&l| l == 0));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>(), k in 1u8..4) {
        let mut r = rng(seed);
        let a = labels(&mut r, [3, 3, 3], k);
        let b = labels(&mut r, [3, 3, 3], k);
        for c in 1..=k {
            let ab = dsc(&a, &b, c).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dsc(&a, &a, c).unwrap(), 1.0);
        }
        for absent in [AbsentClass::ScoreOne, AbsentClass::Skip] {
            let m = mean_dsc(&a, &b, k as usize, absent).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn seg_loss_is_nonnegative_and_smallest_at_the_target(seed in any::<u64>(), p in 2usize..30, k in 1usize..4) {
        let mut r = rng(seed);
        let lbl: Vec<u8> = (0..p).map(|_| rand::Rng::random_range(&mut r, 0..=k as u8)).collect();
        let y = LabelVolume::new([p, 1, 1], lbl).unwrap().one_hot_foreground(k);
        let guess = rand_tensor(&mut r, &[p, k], 0.0, 1.0);
        let cfg = LossConfig::default();
        let loss = |t: Tensor| eval(|g| { let (a, b) = (g.constant(y.clone()), g.constant(t)); seg_loss(g, a, b, &cfg) }).item();
        let perfect = loss(y.clone());
        let other = loss(guess);
        prop_assert!(perfect >= 0.0 && other >= 0.0);
        prop_assert!(perfect <= other);
    }

    #[test]
    fn aux_loss_decreases_towards_the_target(seed in any::<u64>(), p in 2usize..30, k in 1usize..4) {
        let mut r = rng(seed);
        let lbl: Vec<u8> = (0..p).map(|_| rand::Rng::random_range(&mut r, 0..=k as u8)).collect();
        let y = LabelVolume::new([p, 1, 1], lbl).unwrap().one_hot_with_background(k);
        let m0 = rand_stochastic(&mut r, p, k + 1);
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let m: Vec<f64> = m0.data().iter().zip(y.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let m = Tensor::new([p, k + 1], m).unwrap();
            let v = eval(|g| { let (a, b) = (g.constant(y.clone()), g.constant(m)); aux_loss(g, a, b, &cfg) }).item();
            prop_assert!(v >= 0.0);
            prop_assert!(v <= last + 1e-12, "t={t}: {v} > {last}");
            last = v;
        }
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(), lr in 1e-5f64..1.0, epochs in 0usize..500, n in 4usize..64,
        tau in prop_oneof![Just("schedule".to_string()), Just("off".to_string()), (0.0f64..=1.0).prop_map(|t| t.to_string())],
        sim in prop_oneof![Just("dot"), Just("cosine")],
        pooling in prop_oneof![Just("mass"), Just("count")],
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            format!("seed={seed}"), format!("optim.lr={lr}"), format!("train.epochs={epochs}"),
            format!("smg.num_queries={n}"), format!("smg.tau={tau}"), format!("smg.similarity={sim}"),
            format!("ipl.pooling={pooling}"),
        ]).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn volumes_round_trip_bit_exactly(seed in any::<u64>(), x in 1usize..6, y in 1usize..6, z in 1usize..6, c in 1usize..3, flip in any::<prop::sample::Index>()) {
        let mut r = rng(seed);
        let real: Vec<f64> = (0..x * y * z * c).map(|_| rand::Rng::random::<f32>(&mut r) as f64 * 2.0 - 1.0).collect();
        let real = VolumeData::Real(Tensor::new([x, y, z, c], real).unwrap());
        let lbl = VolumeData::Labels(labels(&mut r, [x, y, z], 9));
        for v in [real, lbl] {
            let bytes = encode_volume(&v);
            let back = decode_volume(&bytes).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(encode_volume(&back), bytes.clone());
            let mut bad = bytes.clone();
            bad[flip.index(bytes.len())] ^= 0x10;
            prop_assert!(decode_volume(&bad).is_err());
        }
    }

    #[test]
    fn init_depends_only_on_seed_and_name(seed in any::<u64>(), fan_in in 1usize..50) {
        let spec = InitSpec { fan_in, seed };
        let a = Parameter::init("layer.w", &[3, 4], spec);
        let mut store = ParamStore::new();
        store.init("other", &[5], 2, seed);
        let id = store.init("layer.w", &[3, 4], fan_in, seed);
        prop_assert_eq!(&a.tensor, &store.get(id).tensor);
        let bound = (1.0 / fan_in as f64).sqrt();
        prop_assert!(a.tensor.data().iter().all(|v| v.abs() <= bound));
        let b = Parameter::init("layer.w", &[3, 4], InitSpec { fan_in, seed: seed.wrapping_add(1) });
        prop_assert_ne!(a.tensor, b.tensor);
    }
}

#[test]
fn phantom_foreground_stays_within_shape_bounds() {
    let extents = [32, 32, 32];
    let total = 32.0f64.powi(3);
    for seed in 0..100 {
        let spec = PhantomSpec::standard(extents, 3, seed);
        // the union is at least the smallest possible single shape and at most
        // the sum of the largest ones
        let (mut lo, mut hi) = (f64::INFINITY, 0.0);
        for s in &spec.shapes {
            let vol = |r: f64| match s.kind {
                ShapeKind::Ellipsoid => 4.0 / 3.0 * std::f64::consts::PI * r.powi(3),
                ShapeKind::Box => (2.0 * r).powi(3),
            };
            lo = f64::min(lo, vol(s.radius.0));
            hi += vol(s.radius.1);
        }
        let sample = generate_phantom(&spec).unwrap();
        let fg = sample.labels.data.iter().filter(|&&l| l > 0).count() as f64;
        // voxelisation slack of one voxel shell
        assert!(
            fg >= 0.8 * lo && fg <= 1.2 * hi + 1.0,
            "seed {seed}: {fg} not in [{lo}, {hi}]"
        );
        assert!(fg / total < 0.5, "seed {seed}");
        assert!(sample.labels.max_label() <= 3);
    }
}

#[test]
fn tau_schedule_is_monotone_and_bounded() {
    let mut last = 0.0;
    for e in 0..300 {
        let t = tau_schedule(e);
        assert!((0.1..=0.5).contains(&t) && t >= last);
        last = t;
    }
}
