//! Baseline vs co+kp on a tiny run, merged into a comparison table and SVG.
use holi::cli::{Run, RunConfig};
use holi::corpus::Split;
use holi::eval::render_report;
use holi::model::ModelConfig;
use holi::relate::Branches;

fn main() -> holi::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 40;
    cfg.data.n_test = 20;
    cfg.train.epochs = 2;
    cfg.train.lr = 1e-3;
    cfg.model = ModelConfig { d_model: 16, n_heads: 2, n_encoder_layers: 1, n_decoder_layers: 3, num_queries: 6, ffn_hidden: 32, stem_channels: 4, ..ModelConfig::default() };
    let out = std::env::temp_dir().join("holi-ablation-example");
    let run = Run::create(cfg.clone(), &out)?;
    let test = run.corpus(Split::Test)?;
    let mut rows = Vec::new();
    for b in [Branches::NONE, Branches::parse("co+kp")?] {
        let det = run.train_into(&format!("ablate/{}", b.tag()), &ModelConfig { branches: b, ..cfg.model.clone() })?;
        rows.push(run.evaluate(&det, &b.tag(), None, Some(&test))?);
    }
    let (table, _json, svg) = render_report(rows)?;
    print!("{table}");
    println!("svg: {} bytes; run dir {}", svg.len(), run.dir.display());
    Ok(())
}
