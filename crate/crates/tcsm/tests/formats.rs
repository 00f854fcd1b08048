use proptest::prelude::*;
use tcsm::checkpoint::{decode, encode};
use tcsm::config::RunConfig;
use tcsm_core::trainer::TrainMode;
use tcsm_core::Tensor;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f64>(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn checkpoint_round_trips_bit_exactly(
        entries in prop::collection::vec(("[a-z_.0-9]{0,12}", tensor()), 0..5)
    ) {
        let bytes = encode(entries.iter().map(|(n, t)| (n.as_str(), t)));
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            prop_assert_eq!(bits(t0), bits(t1));
        }
    }

    #[test]
    fn every_truncation_is_rejected(entries in prop::collection::vec(("[a-z]{1,6}", tensor()), 1..3)) {
        let bytes = encode(entries.iter().map(|(n, t)| (n.as_str(), t)));
        for cut in 0..bytes.len() {
            prop_assert!(decode(&bytes[..cut]).is_err(), "prefix of {} bytes accepted", cut);
        }
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode(&longer).is_err());
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        epochs in 1usize..500,
        lr0 in 1e-6f64..1.0,
        lf in 0.01f64..0.8,
        noise in 0.0f64..2.0,
        mode in 0usize..3,
        pinned in prop::option::of(1usize..100),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.train.epochs = epochs;
        cfg.train.lr0 = lr0;
        cfg.labeled_fraction = lf;
        cfg.gen.noise_sigma = noise;
        cfg.train.mode = TrainMode::ALL[mode];
        cfg.rampup_epochs = pinned;
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
