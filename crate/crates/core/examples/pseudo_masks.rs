//! Runs the mask decoder on a phantom and reports, per layer, the grid, the
//! overlap threshold and how many clusters stayed active.

use sipl::data::{generate_phantom, PhantomSpec};
use sipl::experiment::ExperimentConfig;
use sipl::model::Sipl;
use sipl::numerics::{argmax_rows, Graph, ParamStore};

fn main() -> sipl::Result<()> {
    let cfg = ExperimentConfig::default();
    let mut store = ParamStore::new();
    let model = Sipl::new(&mut store, cfg.model_config(), 0)?;
    let sample = generate_phantom(&PhantomSpec::standard([32, 32, 32], 3, 1))?;

    for epoch in [0, 25, 100] {
        let mut g = Graph::new();
        g.bind_frozen(&store);
        let v = g.constant(sample.intensities.clone());
        let out = model.forward(&mut g, v, epoch)?;
        println!("epoch {epoch}");
        for (i, layer) in out.masks.layers.iter().enumerate() {
            let active = layer.assignment.active.iter().filter(|&&a| a).count();
            let m = g.value(layer.m);
            let classes = argmax_rows(m);
            let mut hist = vec![0; m.shape()[1]];
            classes.iter().for_each(|&c| hist[c] += 1);
            let tau = layer.tau.map_or("-".into(), |t| format!("{t:.2}"));
            println!(
                "  layer {} stride {:>2} grid {:?}  tau {tau}  active {active}/{}  argmax classes {hist:?}",
                i + 1,
                layer.stride,
                layer.extents,
                layer.assignment.num_clusters
            );
        }
    }
    Ok(())
}
