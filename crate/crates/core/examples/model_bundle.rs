//! Saves a trained bottleneck with its NEC-5 final layer as a model bundle,
//! reloads it and checks that predictions survive the round trip.
//!
//!     cargo run --release --example model_bundle

mod common;

use cbmkit::formats::{read_bundle, write_bundle, ModelBundle};
use cbmkit::metrics::predictions;
use cbmkit::sparse_final::{select_for_nec, solve_path, PathConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = common::fixture();
    let trained = common::train(&f);
    let s = common::split(&f, &trained);
    let path = solve_path(
        &s.x_train,
        &s.y_train,
        &s.x_val,
        &s.y_val,
        f.model.config.classes,
        &PathConfig::default(),
    )?;
    let layer = select_for_nec(&path, 5.0)?;
    let bundle = ModelBundle::from_models(
        &trained.bottleneck,
        Some(&layer),
        f.dataset.concept_set.clone(),
        "example".into(),
    );
    let file = std::env::temp_dir().join("cbmkit-example.cbmb");
    write_bundle(&bundle, &file)?;
    let loaded = read_bundle(&file)?;
    println!(
        "{} bytes, k = {}, d = {}, nec = {:?}",
        std::fs::metadata(&file)?.len(),
        loaded.header.k,
        loaded.header.d,
        loaded.header.nec
    );

    let z = f.test.embeddings.to_matrix();
    let before = predictions(&layer.logits(&trained.bottleneck.concept_logits(&z, true)?));
    let restored = loaded.final_layer().expect("bundle has a final layer");
    let after = predictions(&restored.logits(&loaded.bottleneck().concept_logits(&z, true)?));
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    println!(
        "{same} of {} test predictions unchanged after f32 round trip",
        before.len()
    );
    Ok(())
}
