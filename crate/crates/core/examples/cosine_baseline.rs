//! The cosine-similarity baseline: forget points with at least `k`
//! neighbours in the rest of the training set at similarity `>= c` are
//! treated as safe to skip.

use lowimpact::dataset::{generate_gaussian_blobs, make_forget_spec, ForgetStrategy};
use lowimpact::filter::{cosine_filter, cosine_qualifying, similarity_vectors};

fn main() -> lowimpact::Result<()> {
    let train = generate_gaussian_blobs(150, 3, 5, 2.5, 9)?;
    let spec = make_forget_spec(&train, 0.2, ForgetStrategy::Random, 9)?;
    let vectors = similarity_vectors(&train, None)?;

    println!("forget set: {} points", spec.forget_ids.len());
    println!("   c   k  qualifying");
    for c in [0.5, 0.8, 0.9, 0.95] {
        for k in [1, 3, 10] {
            let q = cosine_qualifying(&train, &vectors, &spec, c, k)?;
            println!("{c:>4} {k:>3}  {:>10}", q.len());
        }
    }

    match cosine_filter(&train, &vectors, &spec, 0.9, 3, 10, 0) {
        Ok(sample) => println!("sample of 10 at c=0.9, k=3: {sample:?}"),
        Err(e) => println!("{e}"),
    }
    Ok(())
}
