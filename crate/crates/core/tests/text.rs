use erasure_lab::text::*;
use erasure_lab::LinearClassifier;
use nalgebra::DVector;

#[test]
fn labels_match_sentence_content() {
    let c = gen_corpus(&CorpusConfig { n: 300, kappa: 0.8, seed: 2, ..Default::default() }).unwrap();
    assert_eq!(c.len(), 300);
    for (i, s) in c.sentences.iter().enumerate() {
        assert_eq!(s.has_number, c.y_main[i] > 0);
        assert_eq!(s.has_pad, c.y_concept[i] > 0);
    }
    assert!((c.kappa() - 0.8).abs() < 0.01);
}

#[test]
fn intervention_toggles_only_the_pad_block() {
    let c = gen_corpus(&CorpusConfig { n: 50, kappa: 0.5, seed: 1, ..Default::default() }).unwrap();
    for s in &c.sentences {
        let t = intervene_concept(s, !s.has_pad);
        assert_ne!(t.has_pad, s.has_pad);
        assert_eq!(t.has_number, s.has_number);
        let back = intervene_concept(&t, s.has_pad);
        assert_eq!(back.tokens, s.tokens);
    }
}

#[test]
fn concept_blind_classifier_has_zero_delta_prob() {
    let table = EmbeddingTable::new(20, 7).unwrap();
    let c = gen_corpus(&CorpusConfig { n: 100, kappa: 0.9, seed: 3, ..Default::default() }).unwrap();
    let zero = LinearClassifier::new(DVector::zeros(20), 0.3);
    assert_eq!(delta_prob(&zero, &c.sentences, &table).unwrap(), 0.0);
    let pad = table.words.iter().position(|w| w == PAD_WORD).unwrap();
    let w = table.vectors.row(pad).transpose() * 10.0;
    let aligned = LinearClassifier::new(w, 0.0);
    assert!(delta_prob(&aligned, &c.sentences, &table).unwrap() > 0.05);
}

#[test]
fn encodings_have_table_width() {
    let table = EmbeddingTable::new(DEFAULT_DIM, 7).unwrap();
    let c = gen_corpus(&CorpusConfig { n: 40, kappa: 0.7, seed: 4, ..Default::default() }).unwrap();
    let ds = c.encode(&table).unwrap();
    assert_eq!(ds.points.shape(), (40, DEFAULT_DIM));
    assert_eq!(c.encode_toggled(&table).unwrap().shape(), (40, DEFAULT_DIM));
    assert_eq!(EmbeddingTable::new(DEFAULT_DIM, 7).unwrap().vectors, table.vectors);
}

#[test]
fn corpus_roundtrips_through_files() {
    let c = gen_corpus(&CorpusConfig { n: 60, kappa: 0.6, label_noise_rate: 0.1, seed: 5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (s, l) = (dir.path().join("s.txt"), dir.path().join("l.csv"));
    c.save(&s, &l).unwrap();
    let back = Corpus::load(&s, &l).unwrap();
    assert_eq!(back.sentences, c.sentences);
    assert_eq!(back.y_main, c.y_main);
    assert_eq!(back.y_concept, c.y_concept);
}
