use bytes::Bytes;
use fedinfer_core::backend;
use fedinfer_gateway::batch::FileStore;
use fedinfer_gateway::bench::{generate, Arrivals, Lengths, Rate, WorkloadSpec};
use fedinfer_gateway::serving::SseTally;
use proptest::prelude::*;
use serde_json::json;

fn workload() -> impl Strategy<Value = WorkloadSpec> {
    (
        1usize..300,
        prop_oneof![Just(Rate::Infinite), (0.1f64..500.0).prop_map(Rate::PerSec)],
        any::<bool>(),
        any::<u64>(),
        1u32..4096,
    )
        .prop_map(|(n, rate, uniform, seed, max_output)| {
            let mut spec = WorkloadSpec::new("m", n, rate, seed);
            spec.arrivals = if uniform { Arrivals::Uniform } else { Arrivals::Poisson };
            spec.lengths = Lengths::LogNormal {
                prompt_median: 128.0,
                prompt_sigma: 0.8,
                output_median: 200.0,
                output_sigma: 0.7,
                max_output,
            };
            spec
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn workloads_are_reproducible_and_well_formed(spec in workload()) {
        let a = generate(&spec);
        prop_assert_eq!(&a, &generate(&spec));
        prop_assert_eq!(a.len(), spec.n_requests);
        let Lengths::LogNormal { max_output, .. } = spec.lengths else { unreachable!() };
        let mut last = 0.0;
        for (i, r) in a.iter().enumerate() {
            prop_assert_eq!(r.index, i);
            prop_assert!(r.offset_secs >= last);
            last = r.offset_secs;
            prop_assert!((1..=max_output).contains(&r.max_tokens));
            prop_assert_eq!(backend::count_tokens(&r.prompt), r.prompt_tokens);
        }
        if spec.rate == Rate::Infinite {
            prop_assert!(a.iter().all(|r| r.offset_secs == 0.0));
        }
    }

    #[test]
    fn sse_counts_ignore_chunk_boundaries(words in prop::collection::vec("[a-z]{1,6}", 0..20), cut in any::<prop::sample::Index>(), usage in any::<bool>()) {
        let mut body = String::new();
        for w in &words {
            body.push_str(&format!("data: {}\n\n", json!({"choices": [{"delta": {"content": w}}]})));
        }
        if usage {
            body.push_str(&format!("data: {}\n\n", json!({"choices": [], "usage": {"completion_tokens": 99}})));
        }
        body.push_str("data: [DONE]\n\n");
        let bytes = body.as_bytes();
        let at = cut.index(bytes.len() + 1);
        let mut whole = SseTally::default();
        whole.feed(bytes);
        let mut split = SseTally::default();
        split.feed(&bytes[..at]);
        split.feed(&bytes[at..]);
        prop_assert_eq!(whole.tokens(), split.tokens());
        prop_assert_eq!(whole.tokens(), if usage { 99 } else { words.len() as u32 });
    }

    #[test]
    fn mock_text_has_the_requested_length(seed in any::<u64>(), n in 0u32..500) {
        let text = backend::generate(seed, n);
        prop_assert_eq!(backend::count_tokens(&text), n);
        let streamed: String = (0..n).map(|i| backend::token_delta(seed, i)).collect();
        prop_assert_eq!(streamed, text);
    }

    #[test]
    fn file_store_round_trips(data in prop::collection::vec(any::<u8>(), 0..512)) {
        let store = FileStore::new(None).unwrap();
        let id = store.put(Bytes::from(data.clone())).unwrap();
        prop_assert!(id.starts_with("file-"));
        prop_assert_eq!(store.get(&id).unwrap().to_vec(), data.clone());
        prop_assert_eq!(store.put(Bytes::from(data)).unwrap(), id);
    }
}
