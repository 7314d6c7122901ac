//! Generates a phantom, stores it in the binary volume format and reads it
//! back.

use sipl::data::{generate_phantom, load_volume, sample_paths, save_volume, PhantomSpec};

fn main() -> sipl::Result<()> {
    let spec = PhantomSpec::standard([32, 32, 32], 3, 42);
    let sample = generate_phantom(&spec)?;
    for k in 0..=3u8 {
        println!("label {k}: {:>6} voxels", sample.labels.count(k));
    }

    let dir = std::env::temp_dir().join("sipl-volume-example");
    std::fs::create_dir_all(&dir).map_err(|e| sipl::Error::io(&dir, e))?;
    save_volume(&sample, &dir)?;
    let (img, lbl) = sample_paths(&dir, &sample.id);
    for p in [&img, &lbl] {
        let len = std::fs::metadata(p).map_err(|e| sipl::Error::io(p, e))?.len();
        println!("{} ({len} bytes)", p.display());
    }
    let back = load_volume(&dir, &sample.id)?;
    assert_eq!(back, sample);
    println!("round trip is exact");
    Ok(())
}
