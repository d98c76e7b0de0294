//! Byte pair encoding end to end: learn merges from a corpus, segment text
//! with @@ continuation markers, and join it back.

use nmt::bpe::{bpe_decode_line, bpe_learn_with_counts, word_frequencies, Segmenter};

const CORPUS: &[&str] = &[
    "the relationship between the two has deteriorated",
    "the report criticises the continuous building of settlements",
    "relations have been strained for years",
    "the criticised settlements remain contested",
    "building relations requires continuous effort",
    "the strained relationship deteriorated further",
];

fn main() {
    let freq = word_frequencies(CORPUS.iter().copied());
    let (table, counts) = bpe_learn_with_counts(&freq, 30);

    println!("first merges (pair, count at selection):");
    for ((l, r), n) in table.merges().iter().zip(&counts).take(12) {
        println!("  {l} + {r}  ({n})");
    }

    let mut seg = Segmenter::new(&table);
    println!("\nsegmented corpus:");
    for line in CORPUS {
        let encoded = seg.segment_line(line);
        println!("  {encoded}");
        let (decoded, dangling) = bpe_decode_line(&encoded);
        assert_eq!(&decoded, line, "round trip must restore the input");
        assert!(!dangling);
    }

    println!("\nunseen words fall apart into learned subwords:");
    for word in ["criticising", "relationships", "buildings"] {
        println!("  {word} -> {}", nmt::bpe::bpe_apply(&table, word).join(" "));
    }
    println!("\nround trip verified on all {} lines", CORPUS.len());
}
