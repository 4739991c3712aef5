//! Synthesize a small outfit corpus and round-trip it through the annotation format.
use holi::corpus::{corpus_checksum, generate_corpus, parse_annotations, corpus_to_json, GeneratorConfig, TemplateMix, CLASS_NAMES};

fn main() -> holi::Result<()> {
    let g = GeneratorConfig::default();
    let corpus = generate_corpus(7, 12, &TemplateMix::uniform(&g.templates), &g)?;
    for s in corpus.scenes.iter().take(4) {
        let names: Vec<&str> = s.items.iter().map(|it| CLASS_NAMES[it.class_id]).collect();
        println!("{} template {:?}: {}", s.id, s.style_template_id, names.join(", "));
    }
    let text = corpus_to_json(&corpus);
    let back = parse_annotations(&text, "memory.json".as_ref())?;
    println!("{} bytes of JSON, checksum {}", text.len(), corpus_checksum(&back));
    assert_eq!(corpus_checksum(&back), corpus_checksum(&corpus));
    Ok(())
}
