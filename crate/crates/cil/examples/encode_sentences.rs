//! Shows the text pipeline: vocabulary construction, entity-marker
//! insertion, id encoding with padding, and lossless-enough decoding.
//!
//! Every sentence is wrapped as
//!   [CLS] ... [H-CLS] head [H-SEP] ... [T-CLS] tail [T-SEP] ... [SEP]
//! and the encoder later reads the relational representation from the two
//! opening marker positions.

use cil::corpus::{generate_synthetic, SynthConfig};
use cil::text::{decode, encode, Vocab};

fn main() {
    let data = generate_synthetic(&SynthConfig {
        n_relations: 5,
        n_triples: 120,
        seed: 3,
        ..SynthConfig::default()
    })
    .expect("valid generator config");

    let vocab = Vocab::from_corpora(&[&data.train], 1);
    println!("vocabulary: {} entries (9 specials + words)", vocab.len());

    let bag = data.train.bags.iter().find(|b| b.relation_id != 0).unwrap();
    let inst = &bag.instances[0];
    println!("\nraw tokens:   {}", inst.tokens.join(" "));
    println!("head span {:?} = {:?}", inst.head_span, inst.head_text());
    println!("tail span {:?} = {:?}", inst.tail_span, inst.tail_text());

    let max_len = 24;
    let enc = encode(inst, &vocab, max_len).expect("sentence fits max_len");
    println!("\nencoded ({} real positions of {max_len}):", enc.n_real);
    println!("  ids:     {:?}", enc.ids);
    println!("  mask:    {:?}", enc.attention_mask());
    println!("  markers: head at {}, tail at {}", enc.head_marker, enc.tail_marker);
    assert_eq!(vocab.token(enc.ids[enc.head_marker]), "[H-CLS]");
    assert_eq!(vocab.token(enc.ids[enc.tail_marker]), "[T-CLS]");

    println!("\ndecoded: {}", decode(&enc.ids[..enc.n_real], &vocab));

    // Unknown words survive as [UNK] rather than failing the pipeline.
    let mut odd = inst.clone();
    let non_entity = (0..odd.tokens.len()).find(|&i| !odd.in_entity(i)).unwrap();
    odd.tokens[non_entity] = "zyzzyva".into();
    let enc2 = encode(&odd, &vocab, max_len).unwrap();
    println!("\nwith an out-of-vocabulary word: {}", decode(&enc2.ids[..enc2.n_real], &vocab));
}
