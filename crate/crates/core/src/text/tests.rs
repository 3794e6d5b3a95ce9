use proptest::prelude::*;

use super::*;

fn meta(m: &str, b: Option<f64>, tr: Option<f64>, te: Option<f64>, man: Option<&str>) -> ImagingMeta {
    ImagingMeta {
        modality: m.into(),
        field_strength: b,
        tr_ms: tr,
        te_ms: te,
        manufacturer: man.map(Into::into),
        sequence_name: None,
    }
}

#[test]
fn description_template() {
    let full = meta("T1w", Some(3.0), Some(500.0), Some(10.0), Some("VendorA"));
    assert_eq!(build_description(&full).unwrap(), "MR T1w; 3.0T; TR=500ms; TE=10ms; VendorA");
    assert_eq!(build_description(&meta("FLAIR", Some(1.5), None, None, None)).unwrap(), "MR FLAIR; 1.5T");
    assert_eq!(build_description(&full).unwrap(), build_description(&full.clone()).unwrap());
    let with_seq = ImagingMeta { sequence_name: Some("mprage".into()), ..full.clone() };
    assert_eq!(build_description(&with_seq).unwrap(), build_description(&full).unwrap());
}

#[test]
fn description_rejects_bad_metadata() {
    assert!(matches!(build_description(&ImagingMeta::new("")), Err(TextError::Metadata(_))));
    assert!(build_description(&meta("T1w", Some(-1.0), None, None, None)).is_err());
    assert!(build_description(&meta("T1w brain", None, None, None, None)).is_err());
    assert!(build_description(&meta("T1w", None, None, None, Some("Prostate Imaging Co"))).is_err());
    assert!(build_description(&meta("T1w", None, None, None, Some("TE=10ms"))).is_err());
    assert!(build_description(&meta("T1w", None, None, None, Some("3.0T"))).is_err());
}

#[test]
fn organ_tokens_match_whole_words() {
    assert_eq!(organ_token("MR T1w; BRAIN"), Some("brain"));
    assert_eq!(organ_token("Brainlab"), None);
    assert_eq!(organ_token("MR T2w; 1.5T; VendorB"), None);
}

#[test]
fn embedding_contract() {
    let a = embed("MR T1w; 3.0T").unwrap();
    assert_eq!(a, embed("MR T1w; 3.0T").unwrap());
    assert_eq!(a.dim(), DEFAULT_DIM);
    let b = embed("MR T2w; 3.0T").unwrap();
    let d = pairwise_dist(&[a, b]).unwrap();
    assert!(d[[0, 1]] > 0.0);
    assert!(matches!(embed(""), Err(TextError::EmptyText)));
    assert_eq!(embed_hashing("ab", 8).unwrap().dim(), 8);
}

#[test]
fn hashing_matches_independent_recount() {
    // recount trigram buckets with a separately written FNV-1a
    let text = "MR DWI; 1.5T; TR=3000ms";
    let dim = 32;
    let mut v = vec![0.0f64; dim];
    let b = text.as_bytes();
    for w in b.windows(3) {
        let mut h = 14695981039346656037u64;
        for &c in w {
            h = (h ^ u64::from(c)).wrapping_mul(1099511628211);
        }
        v[(h % dim as u64) as usize] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e = embed_hashing(text, dim).unwrap();
    for (a, b) in e.vector.iter().zip(&v) {
        assert!((a - b / n).abs() < 1e-15);
    }
}

fn unit(dim: usize, i: usize) -> TextEmbedding {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    TextEmbedding { vector: v, source_text: format!("e{i}") }
}

#[test]
fn pairwise_cases() {
    let e = embed("MR T1w").unwrap();
    assert!(pairwise_dist(&[e.clone(), e.clone(), e.clone()]).unwrap().iter().all(|&x| x == 0.0));
    let d = pairwise_dist(&[unit(4, 0), unit(4, 1)]).unwrap();
    assert!((d[[0, 1]] - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(d[[0, 0]], 0.0);
    assert!(matches!(pairwise_dist(&[unit(4, 0), unit(3, 0)]), Err(TextError::Shape(_))));
    assert!(pairwise_dist(&[unit(4, 0)]).is_err());
}

#[test]
fn pairwise_matches_nested_loop_oracle() {
    let texts = ["MR T1w; 3.0T", "MR T2w; 3.0T", "MR FLAIR; 1.5T", "MR DWI", "MR DCE; 3.0T; VendorC"];
    let e: Vec<_> = texts.iter().map(|t| embed(t).unwrap()).collect();
    let d = pairwise_dist(&e).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..DEFAULT_DIM {
                let t = e[i].vector[k] - e[j].vector[k];
                s += t * t;
            }
            assert!((d[[i, j]] - s.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn external_table_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let texts = ["MR T1w; 3.0T", "MR T2w; 1.5T"];
    let entries: Vec<_> = texts.iter().map(|t| (t.to_string(), embed_hashing(t, 16).unwrap().vector)).collect();
    let table = EmbeddingTable::new(16, entries).unwrap();
    let (dp, tp) = (dir.path().join("desc.txt"), dir.path().join("emb.bin"));
    table.save(&dp, &tp).unwrap();
    let bytes = std::fs::read(&tp).unwrap();
    assert!(bytes.starts_with(b"16 2\n"));
    assert_eq!(bytes.len(), 5 + 2 * 16 * 4);
    let back = EmbeddingTable::load(&dp, &tp).unwrap();
    let provider = TextProvider::External(back);
    let e = provider.embed(texts[1]).unwrap();
    let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-12);
    let orig = embed_hashing(texts[1], 16).unwrap();
    assert!(e.vector.iter().zip(&orig.vector).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(provider.embed("MR unknown").is_err());
    std::fs::write(&tp, b"16 3\n").unwrap();
    assert!(EmbeddingTable::load(&dp, &tp).is_err());
}

#[test]
fn external_table_rejects_non_unit_rows() {
    assert!(EmbeddingTable::new(2, vec![("a".into(), vec![1.0, 1.0])]).is_err());
    assert!(EmbeddingTable::new(2, vec![("a".into(), vec![1.0])]).is_err());
}

#[test]
fn provider_kind_parses_from_config() {
    #[derive(serde::Deserialize)]
    struct C {
        text_provider: ProviderKind,
    }
    let c: C = toml::from_str("text_provider = \"external\"").unwrap();
    assert_eq!(c.text_provider, ProviderKind::External);
}

fn arb_meta() -> impl Strategy<Value = ImagingMeta> {
    (
        prop::sample::select(vec!["T1w", "T2w", "FLAIR", "DWI", "DCE", "PD"]),
        prop::option::of(prop::sample::select(vec![0.5, 1.0, 1.5, 3.0, 7.0])),
        prop::option::of(1u32..5000),
        prop::option::of(1u32..200),
        prop::option::of(prop::sample::select(vec!["VendorA", "VendorB", "Acme Medical"])),
    )
        .prop_map(|(m, b, tr, te, man)| meta(m, b, tr.map(f64::from), te.map(f64::from), man))
}

proptest! {
    #[test]
    fn descriptions_are_injective(a in arb_meta(), b in arb_meta()) {
        let (da, db) = (build_description(&a).unwrap(), build_description(&b).unwrap());
        prop_assert_eq!(a == b, da == db);
        prop_assert!(organ_token(&da).is_none());
    }

    #[test]
    fn embeddings_are_unit_norm(text in "\\PC{1,60}", dim in 1usize..300) {
        let e = embed_hashing(&text, dim).unwrap();
        let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
        prop_assert!(e.vector.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn distance_is_a_metric(texts in prop::collection::vec("[a-zA-Z0-9 ;=.]{1,30}", 3..7)) {
        let e: Vec<_> = texts.iter().map(|t| embed(t).unwrap()).collect();
        let d = pairwise_dist(&e).unwrap();
        let n = e.len();
        for i in 0..n {
            prop_assert_eq!(d[[i, i]], 0.0);
            for j in 0..n {
                prop_assert_eq!(d[[i, j]], d[[j, i]]);
                for k in 0..n {
                    prop_assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-12);
                }
            }
        }
    }
}
