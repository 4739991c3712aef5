//! Relation weights and per-head self-attention of every decoder layer for one scene.
use holi::corpus::{generate_corpus, GeneratorConfig, TemplateMix};
use holi::model::{Detector, ModelConfig, SceneInput};
use holi::stats::CooccurrenceStats;

fn main() -> holi::Result<()> {
    let g = GeneratorConfig::default();
    let corpus = generate_corpus(5, 20, &TemplateMix::uniform(&g.templates), &g)?;
    let stats = CooccurrenceStats::from_corpus(&corpus)?;
    let model = ModelConfig { d_model: 16, n_heads: 2, n_encoder_layers: 1, n_decoder_layers: 3, num_queries: 4, ffn_hidden: 32, stem_channels: 4, ..ModelConfig::default() };
    let det = Detector::new(model, 5)?;
    let input = SceneInput::from_scene(&corpus.scenes[0])?;
    for (l, li) in det.inspect(&input, Some(&stats))?.iter().enumerate() {
        println!("layer {} classes {:?}", l + 1, li.prediction.argmax_classes());
        match &li.relation_weights {
            // the context encoder starts at zero, so a fresh model shows an all-zero bias
            Some(w) => println!("  W_rel rows: {:?}", (0..w.shape()[0]).map(|i| w.row(i).to_vec()).collect::<Vec<_>>()),
            None => println!("  no relation weights"),
        }
        for (h, a) in li.self_attention.iter().enumerate() {
            println!("  head {h} row 0: {:?}", a.row(0).iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
