//! Minimum-cost assignment of ground truths to queries, ties broken deterministically.
use holi::train::{hungarian_match, CostMatrix};

fn main() -> holi::Result<()> {
    let cost = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0, 2.0], vec![2.0, 0.0, 5.0, 3.0], vec![3.0, 2.0, 2.0, 2.0]])?;
    let m = hungarian_match(&cost)?;
    println!("assignment {:?}, cost {}", m.assignment, m.cost);
    let ties = CostMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]])?;
    println!("all-equal costs -> {:?}", hungarian_match(&ties)?.assignment);
    Ok(())
}
