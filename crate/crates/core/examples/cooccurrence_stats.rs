//! Co-occurrence counts and the three derived matrices on a hand-built corpus.
use holi::corpus::Corpus;
use holi::stats::CooccurrenceStats;

fn main() -> holi::Result<()> {
    let corpus = Corpus::from_class_sets(4, &[&[1, 2], &[1, 3], &[1, 2]]);
    let s = CooccurrenceStats::from_corpus(&corpus)?;
    println!("A[1,2] = {}", s.counts.get(1, 2));
    println!("R_nc[1,2] = {:.4}  R_nc[2,1] = {:.4}", s.normalized_count.get(1, 2), s.normalized_count.get(2, 1));
    println!("pearson[1,2] = {:.4}", s.pearson.get(1, 2));
    println!("tanh-PMI[1,2] = {:.4}  tanh-PMI[2,3] = {:.4}", s.tanh_pmi.get(1, 2), s.tanh_pmi.get(2, 3));
    for (name, csv) in s.csv_exports() {
        println!("--- {name}\n{csv}");
    }
    Ok(())
}
