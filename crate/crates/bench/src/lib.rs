//! Fixtures shared by the benchmarks: randomly initialized models at the
//! default sizes over the vocabulary of a small synthetic corpus.

use actgen_core::corpus::{generate_corpus, prepare, Prepared};
use actgen_core::delex::build_vocab;
use actgen_core::ontology::encode_control;
use actgen_core::{CnnModel, ControlVector, Direction, EmbeddingTable, Ontology, RnnLm, TemplatePack, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub ont: Ontology,
    pub corpus: Vec<Prepared>,
    pub vocab: Vocabulary,
    pub emb: EmbeddingTable,
    pub rnn: RnnLm,
    pub cnn: CnnModel,
    pub cv: ControlVector,
    pub tokens: Vec<usize>,
}

impl Fixture {
    pub fn new(embed: usize, hidden: usize) -> Self {
        let ont = Ontology::restaurant();
        let raw = generate_corpus(&ont, &TemplatePack::restaurant(), 300, 7).expect("corpus");
        let (corpus, _) = prepare(&ont, &raw).expect("prepare");
        let delex: Vec<_> = corpus.iter().map(|p| p.delex.clone()).collect();
        let vocab = build_vocab(&ont, &delex);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingTable::uniform(vocab.len(), embed, 0.3, &mut rng);
        let rnn = RnnLm::uniform(vocab.len(), embed, hidden, ont.control_dim(), Direction::Forward, 0.0, 0.3, &mut rng);
        let cnn = CnnModel::uniform(&[1, 2, 3, 4], embed, hidden, ont.num_acts(), ont.slot_bits(), 0.3, &mut rng);
        let cv = encode_control(&ont, &corpus[0].da);
        let tokens = vocab.encode(&corpus[0].delex).expect("encode");
        Fixture { ont, corpus, vocab, emb, rnn, cnn, cv, tokens }
    }
}
