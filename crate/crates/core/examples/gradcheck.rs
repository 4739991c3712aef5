//! Finite-difference checks of every tape primitive and of the full set loss.
use holi::autodiff::primitive_suite;
use holi::corpus::{generate_corpus, GeneratorConfig, TemplateMix};
use holi::stats::CooccurrenceStats;
use holi::train::end_to_end_grad_check;

fn main() -> holi::Result<()> {
    for (op, r) in primitive_suite(0, 1e-6)? {
        println!("{op:<16} {:>4} coords  max rel err {:.2e}", r.coordinates, r.max_rel_error);
    }
    let g = GeneratorConfig::default();
    let stats = CooccurrenceStats::from_corpus(&generate_corpus(1, 50, &TemplateMix::uniform(&g.templates), &g)?)?;
    let r = end_to_end_grad_check(1, &stats, 1e-6)?;
    println!("end-to-end        {:>4} coords  max rel err {:.2e}", r.coordinates, r.max_rel_error);
    Ok(())
}
