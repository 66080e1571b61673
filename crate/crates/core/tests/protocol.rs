use privtx_core::he::{keygen, Evaluator, HeParams, Phase};
use privtx_core::packing::{he_left_matmul, he_matmul, pack, unpack, KernelMode, PackingLayout, Strategy};
use privtx_core::protocol::{
    estimate_latency, ChannelModel, MsgKind, OpCostTable, Session, SessionConfig, Step, Transcript,
};
use privtx_core::sharing::{reconstruct, share, Party};
use privtx_core::{FixedTensor, RingParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn naive_product(a: &FixedTensor, b: &FixedTensor) -> FixedTensor {
    let mut out = FixedTensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0u64;
            for k in 0..a.cols() {
                acc = acc.wrapping_add(a.get(i, k).wrapping_mul(b.get(k, j)));
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn rand(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> FixedTensor {
    FixedTensor::random(&RingParams::default(), rows, cols, rng)
}

fn session(strategy: Strategy, seed: u64) -> Session {
    let cfg = SessionConfig {
        he: HeParams::new(32, RingParams::default()).unwrap(),
        strategy,
        ..SessionConfig::default()
    };
    Session::new(cfg, seed).unwrap()
}

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![Just(Strategy::FeaturesFirst), Just(Strategy::TokensFirst)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shares_reconstruct(rows in 1usize..6, cols in 1usize..6, seed: u64) {
        let ring = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = rand(rows, cols, &mut rng);
        let (c, s) = share(&x, "x", &ring, &mut rng);
        prop_assert_eq!(reconstruct(&c, &s).unwrap(), x);
    }

    #[test]
    fn packing_round_trips(st in strategy(), n in 1usize..9, d in 1usize..12, seed: u64) {
        let ring = RingParams::default();
        let ev = Evaluator::new(HeParams::new(16, ring).unwrap()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = keygen(ev.params(), &mut rng);
        let x = rand(n, d, &mut rng);
        let layout = PackingLayout::new(st, n, d, 16).unwrap();
        let cts = pack(&ev, &x, &layout, &keys.public).unwrap();
        prop_assert_eq!(cts.len(), (n * d).div_ceil(16));
        prop_assert_eq!(unpack(&ev, &cts, &layout, &keys.secret).unwrap(), x);
    }

    #[test]
    fn kernels_agree_with_plain_products(
        st in strategy(),
        n in 1usize..5,
        d in 1usize..7,
        k in 1usize..4,
        seed: u64,
    ) {
        let ring = RingParams::default();
        let ev = Evaluator::new(HeParams::new(16, ring).unwrap()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = keygen(ev.params(), &mut rng);
        let x = rand(n, d, &mut rng);
        let w = rand(d, k, &mut rng);
        let a = rand(k, n, &mut rng);
        let layout = PackingLayout::new(st, n, d, 16).unwrap();
        let cts = pack(&ev, &x, &layout, &keys.public).unwrap();
        for mode in [KernelMode::Naive, KernelMode::LogStep] {
            let (y, lay) = he_matmul(&ev, &cts, &layout, &w, mode).unwrap();
            prop_assert_eq!(unpack(&ev, &y, &lay, &keys.secret).unwrap(), naive_product(&x, &w));
            let (z, lay) = he_left_matmul(&ev, &a, &cts, &layout, mode).unwrap();
            prop_assert_eq!(unpack(&ev, &z, &lay, &keys.secret).unwrap(), naive_product(&a, &x));
        }
        prop_assert_eq!(ev.total_counts().mul_ct_ct, 0);
    }

    #[test]
    fn fhgs_scores_reconstruct(st in strategy(), n in 1usize..5, m in 1usize..7, seed: u64) {
        let mut s = session(st, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
        let (q, k, q_c, k_c) = (rand(n, m, &mut rng), rand(n, m, &mut rng), rand(n, m, &mut rng), rand(n, m, &mut rng));
        let t = s.fhgs_offline(q_c.clone(), k_c.transpose()).unwrap();
        let online = s.ev.counts(Phase::Online);
        let (c, sv) = s.run_fhgs_qk(&t, &q.sub(&q_c).unwrap(), &k.sub(&k_c).unwrap()).unwrap();
        prop_assert_eq!(c.add(&sv).unwrap(), naive_product(&q, &k.transpose()));
        let used = s.ev.counts(Phase::Online).saturating_sub(&online);
        prop_assert_eq!(used.enc, 0);
        prop_assert_eq!(used.mul_ct_ct, 0);
        prop_assert_eq!(s.transcript.interactions(Step::Embed, Phase::Online), 1);
    }

    #[test]
    fn hgs_layers_reconstruct(st in strategy(), n in 1usize..5, d in 1usize..7, k in 1usize..5, seed: u64) {
        let mut s = session(st, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 2);
        let (x, r, w1, w2) = (rand(n, d, &mut rng), rand(n, d, &mut rng), rand(d, k, &mut rng), rand(d, 1, &mut rng));
        let (c, m) = s.hgs_offline(&r, &[&w1, &w2]).unwrap();
        let xs = s.share_input(&x, &r).unwrap();
        let out = s.run_hgs_layer(&[&w1, &w2], &xs, &m).unwrap();
        prop_assert_eq!(out[0].add(&c.outs[0]).unwrap(), naive_product(&x, &w1));
        prop_assert_eq!(out[1].add(&c.outs[1]).unwrap(), naive_product(&x, &w2));
        prop_assert_eq!(s.ev.counts(Phase::Online).total(), 0);
    }

    #[test]
    fn latency_is_linear(k in 0usize..20, bytes in 1u64..1u64 << 40) {
        let ch = ChannelModel::default();
        let mut t = Transcript::new();
        for i in 0..k {
            t.log(Party::Server, Phase::Online, MsgKind::Share, 1, Step::Qkv, i).unwrap();
        }
        t.log(Party::Client, Phase::Online, MsgKind::Share, bytes, Step::Others, 0).unwrap();
        let got = estimate_latency(&t, &ch, &OpCostTable::zero()).online_s;
        let want = k as f64 * ch.delay_s + (bytes + k as u64) as f64 / ch.bandwidth_bps;
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn attention_value_with_identity_weights() {
    let ring = RingParams::default();
    for st in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
        let mut s = session(st, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = FixedTensor::identity(&ring, 4, 1);
        let v = rand(4, 3, &mut rng);
        let (a_c, v_c) = (rand(4, 4, &mut rng), rand(4, 3, &mut rng));
        let t = s.fhgs_offline(a_c.clone(), v_c.clone()).unwrap();
        let (c, sv) = s
            .run_attention_value(&t, &a.sub(&a_c).unwrap(), &v.sub(&v_c).unwrap())
            .unwrap();
        assert_eq!(c.add(&sv).unwrap(), v);
        assert!(s.run_attention_value(&t, &a, &v).is_err(), "triple reuse");
    }
}

#[test]
fn chgs_scores_match_plain() {
    for st in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
        let mut s = session(st, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (n, v, d) = (3, 5, 2);
        let (x, r, e, lam, b) = (
            rand(n, v, &mut rng),
            rand(n, v, &mut rng),
            rand(v, d, &mut rng),
            rand(n, d, &mut rng),
            rand(d, d, &mut rng),
        );
        let m = s.chgs_offline(&r, &e, &b).unwrap();
        let before = s.ev.counts(Phase::Online);
        let xs = s.share_input(&x, &r).unwrap();
        let (c, sv) = s.run_chgs_block(&m, &xs, &e, &lam, &b).unwrap();
        let p = naive_product(&x, &e).add(&lam).unwrap();
        assert_eq!(
            c.add(&sv).unwrap(),
            naive_product(&naive_product(&p, &b), &p.transpose())
        );
        assert_eq!(s.ev.counts(Phase::Online).saturating_sub(&before).mul_ct_ct, 0);
    }
}
