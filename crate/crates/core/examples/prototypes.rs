//! Prototype learning on its own: pool class proposals from a mask, fuse them
//! with learned common proposals and read out per-voxel class probabilities.

use sipl::ipl::{label_map, pixel_to_prototype_prob, predict_masks, Ipl, IplConfig, Pooling, ProbSign};
use sipl::numerics::{Graph, Interpolation, ParamStore, Tensor};

fn main() -> sipl::Result<()> {
    let (k, d_i, d) = (2, 3, 4);
    let mut store = ParamStore::new();
    let ipl = Ipl::new(
        &mut store,
        IplConfig {
            num_classes: k,
            d_i,
            d,
            pooling: Pooling::MassNormalized,
            mask_resize: Interpolation::Trilinear,
        },
        7,
    );

    // 2x2x2 intermediate features and a mask on a 4x4x4 grid: class 1 on the
    // left half, class 2 on the right, background nowhere
    let f_mid = Tensor::new([2, 2, 2, d_i], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let mut mask = Tensor::zeros([4, 4, 4, k + 1]);
    for x in 0..4 {
        for yz in 0..16 {
            let c = usize::from(x >= 2);
            mask.data_mut()[(x * 16 + yz) * (k + 1) + c] = 1.0;
        }
    }
    let f_out = Tensor::new([4, 4, 4, d], (0..256).map(|i| (i as f64 * 0.11).cos()).collect())?;

    let mut g = Graph::new();
    g.bind_frozen(&store);
    let (fm, mv, fo) = (g.constant(f_mid), g.constant(mask), g.constant(f_out));
    let protos = ipl.prototypes(&mut g, fm, Some(mv))?;
    println!("instance proposals {:?}", g.value(protos.instance).data());
    let fused = g.value(protos.fused).clone();
    println!("fused prototypes {:?}", fused.data());

    let y_hat = predict_masks(&mut g, fo, protos.fused)?;
    let labels = label_map(g.value(y_hat), [4, 4, 4], 0.5)?;
    println!(
        "voxels per label: {:?}",
        (0..=k as u8).map(|l| labels.count(l)).collect::<Vec<_>>()
    );

    let voxel = &g.value(fo).data()[..d];
    for sign in [ProbSign::Negative, ProbSign::Positive] {
        println!(
            "{sign:?} pixel-to-prototype probabilities {:?}",
            pixel_to_prototype_prob(voxel, &fused, sign)?
        );
    }
    Ok(())
}
