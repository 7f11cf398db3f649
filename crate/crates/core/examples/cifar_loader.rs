//! Reads a CIFAR binary batch. With no argument it writes a two-record
//! CIFAR-10 file to the temp directory and reads that back.

use std::path::PathBuf;

use dimprune::data::{load_cifar, load_cifar_streamed, upsample_nearest, CifarVariant};

fn main() -> dimprune::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (path, variant) = match args.as_slice() {
        [p] => (PathBuf::from(p), CifarVariant::Cifar10),
        [p, v] if v == "100" => (PathBuf::from(p), CifarVariant::Cifar100),
        _ => {
            let p = std::env::temp_dir().join("dimprune_example_batch.bin");
            let mut bytes = Vec::new();
            for label in [3u8, 7] {
                bytes.push(label);
                bytes.extend((0..3072).map(|i| ((i * 7 + label as usize * 40) % 256) as u8));
            }
            std::fs::write(&p, bytes).map_err(|e| dimprune::Error::io(&p, e))?;
            (p, CifarVariant::Cifar10)
        }
    };
    let ds = load_cifar(&path, variant)?;
    println!(
        "{}: {} images of shape {:?}, {} classes",
        path.display(),
        ds.len(),
        ds.image_shape(),
        ds.num_classes
    );
    println!("first labels: {:?}", &ds.labels[..ds.len().min(10)]);
    let streamed = load_cifar_streamed(&path, variant, 1 << 16)?;
    println!("streamed read agrees: {}", streamed == ds);
    let up = upsample_nearest(&ds, 64)?;
    println!("upsampled to {:?}", up.images.shape());
    Ok(())
}
