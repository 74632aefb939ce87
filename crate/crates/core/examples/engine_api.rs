//! Drive the engine directly with hand-built detector output.
//!
//! Two categories, a 4-d embedding space, and a stream where every image
//! shows an object that sits slightly off the "cat" text embedding. The
//! engine nudges the stored cat embedding toward what it keeps seeing.

use semevo::vecmath::cosine;
use semevo::{BBox, Candidate, Engine, Hyperparams, Snapshot};

fn main() -> semevo::Result<()> {
    let text = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
    let seen_cat = vec![0.9, 0.05, 0.4, 0.0];

    let hp = Hyperparams { n: 500, sigma: 0.2, tau_base: 0.6, ..Default::default() };
    let mut engine = Engine::new(hp, 2, 4)?;

    for i in 0..20 {
        let snapshot = Snapshot {
            image_id: format!("img{i}"),
            image_size: (100.0, 100.0),
            text_embeddings: text.clone(),
            proposals: vec![Candidate { visual: seen_cat.clone(), bbox: BBox::new(10.0, 10.0, 50.0, 50.0), source: None }],
            ground_truth: None,
        };
        let out = engine.process_image(&snapshot)?;
        if i % 5 == 0 {
            let cat = &out.prediction_text[0];
            println!(
                "image {i:2}: active {:?}, cos(cat text, object) = {:.4}, detection probs {:?}",
                out.trace.active,
                cosine(cat, &seen_cat)?,
                out.detections.iter().map(|d| d.probs.clone()).collect::<Vec<_>>()
            );
        }
    }
    let final_cat = &engine.prediction_embeddings(&text)[0];
    println!(
        "after {} images: cos(cat, object) {:.4} -> {:.4}, refined {} times",
        engine.images_processed(),
        cosine(&text[0], &seen_cat)?,
        cosine(final_cat, &seen_cat)?,
        engine.bank().counter(0)
    );
    Ok(())
}
