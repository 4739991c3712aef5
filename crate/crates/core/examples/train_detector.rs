//! Train a small contextual detector for a few hundred steps and checkpoint it.
use holi::corpus::{generate_corpus, GeneratorConfig, TemplateMix};
use holi::model::{Detector, ModelConfig};
use holi::stats::CooccurrenceStats;
use holi::train::{train_loop, TrainConfig, TrainOutput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = GeneratorConfig::default();
    let corpus = generate_corpus(3, 60, &TemplateMix::uniform(&g.templates), &g)?;
    let stats = CooccurrenceStats::from_corpus(&corpus)?;
    let model = ModelConfig { d_model: 16, n_heads: 2, n_encoder_layers: 1, n_decoder_layers: 3, num_queries: 6, ffn_hidden: 32, stem_channels: 4, ..ModelConfig::default() };
    let mut det = Detector::new(model, 3)?;
    let cfg = TrainConfig { epochs: 5, lr: 1e-3, ..TrainConfig::default() };
    let dir = std::env::temp_dir().join("holi-train-example");
    std::fs::create_dir_all(&dir)?;
    let summary = train_loop(&mut det, &corpus, Some(&stats), &cfg, 3, Some(TrainOutput::new(&dir)), &mut |m| {
        if m.step % 60 == 0 {
            println!("epoch {} step {:>3} loss {:.3} (cls {:.3} l1 {:.3} giou {:.3})", m.epoch, m.step, m.total, m.cls, m.l1, m.giou);
        }
    })?;
    println!("{} steps; checkpoints in {}", summary.steps, dir.display());
    Ok(())
}
