//! Synthetic hierarchical data, the text dataset format and feature
//! standardisation.
//!
//! ```text
//! cargo run --release --example dataset_files
//! ```

use hcfsln::data::{generate_synthetic, read_dataset, standardize_fit_transform, write_dataset, SynthSpec};

fn main() -> hcfsln::Result<()> {
    let spec = SynthSpec {
        n_per_class: 6,
        seq_len: 5,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    println!(
        "{} samples, classes {:?}, L = {}, modalities {:?}",
        ds.meta.n, ds.meta.class_counts, ds.meta.seq_len, ds.meta.modalities
    );

    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf)?;
    let text = String::from_utf8(buf.clone()).expect("utf-8");
    println!("\nfirst lines of the file:");
    for line in text.lines().take(3) {
        let shown: String = line.chars().take(100).collect();
        println!("  {shown}");
    }

    let back = read_dataset(buf.as_slice(), Some(&spec.modalities))?;
    println!("\nround trip identical: {}", back.samples == ds.samples);

    let (scaler, scaled) = standardize_fit_transform(&ds.samples)?;
    println!("per-feature means before scaling {:.3?}", scaler.mean);
    let first = &scaled[0].modalities[0];
    println!("first standardised timestep of modality 0: {:.3?}", &first.data()[..spec.modalities[0].1]);
    Ok(())
}
