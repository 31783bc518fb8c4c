use mixerlab::attention::{
    attention_weights, linear_attention_causal, linear_attention_parallel, linear_attention_recurrent, softmax_attention,
    AttnParams, Kernel, WeightForm,
};
use mixerlab::blocks::{block_flops, BlockSpec};
use mixerlab::numerics::matmul;
use mixerlab::scan::{scan_parallel, scan_serial, ScanElement};
use mixerlab::ssm::{
    forget_gate, selective_scan_matrix_form, selective_scan_parallel, selective_scan_per_channel, selective_scan_serial,
    SsmParams,
};
use mixerlab::unified::{from_attention, from_ssm, normalized_weights, unified_forward, MixerConfig, MixerDims, UnifiedParams};
use mixerlab::{Rng, TokenMatrix};
use proptest::prelude::*;

/// `(seed, N, C, d, H)` with `N ≤ 64`, `C ≤ 32`, `d ≤ 16`.
fn dims() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..=64, prop::sample::select(vec![1usize, 2, 4])).prop_flat_map(|(seed, n, h)| {
        (Just(seed), Just(n), (1..=32 / h).prop_map(move |c| c * h), (1..=16 / h).prop_map(move |d| d * h), Just(h))
    })
}

fn kernel() -> impl Strategy<Value = Kernel> {
    prop::sample::select(vec![Kernel::EluPlusOne, Kernel::ReluPlusEps])
}

fn attn(seed: u64, n: usize, c: usize, d: usize, h: usize, k: Kernel) -> (TokenMatrix, AttnParams<f64>) {
    let mut rng = Rng::new(seed);
    let p = AttnParams::random(c, d, h, k, &mut rng).unwrap();
    (rng.uniform_matrix(n, c, -1.0, 1.0), p)
}

fn ssm(seed: u64, n: usize, c: usize, d: usize) -> (TokenMatrix, SsmParams<f64>) {
    let mut rng = Rng::new(seed);
    let p = SsmParams::random(c, d, None, &mut rng).unwrap();
    (rng.uniform_matrix(n, c, -1.0, 1.0), p)
}

fn swap_first_two(x: &TokenMatrix) -> TokenMatrix {
    let mut s = x.clone();
    s.row_mut(0).copy_from_slice(x.row(1));
    s.row_mut(1).copy_from_slice(x.row(0));
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reordered_linear_attention_matches_explicit_weights((seed, n, c, d, h) in dims(), k in kernel()) {
        let (x, p) = attn(seed, n, c, d, h, k);
        let (_, _, v) = p.project(&x).unwrap();
        let ch = c / h;
        let mut explicit = TokenMatrix::zeros(n, c);
        for (head, w) in attention_weights(&x, &p, WeightForm::LinearGlobal).unwrap().iter().enumerate() {
            explicit.set_column_block(head * ch, &matmul(w, &v.column_block(head * ch, ch)).unwrap());
        }
        prop_assert!(linear_attention_parallel(&x, &p).unwrap().max_rel_diff(&explicit) <= 1e-10);
    }

    #[test]
    fn recurrent_matches_masked_causal((seed, n, c, d, h) in dims(), k in kernel()) {
        let (x, p) = attn(seed, n, c, d, h, k);
        let (rec, state) = linear_attention_recurrent(&x, &p).unwrap();
        prop_assert!(rec.max_abs_diff(&linear_attention_causal(&x, &p).unwrap()) <= 1e-12);
        prop_assert_eq!(state.step, n);
    }

    #[test]
    fn attention_weight_rows_sum_to_one((seed, n, c, d, h) in dims(), k in kernel()) {
        let (x, p) = attn(seed, n, c, d, h, k);
        for form in [WeightForm::Softmax, WeightForm::LinearGlobal, WeightForm::LinearCausal] {
            for w in attention_weights(&x, &p, form).unwrap() {
                for i in 0..n {
                    prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                    prop_assert!(w.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
        prop_assert!(softmax_attention(&x, &p).unwrap().is_finite());
    }

    #[test]
    fn three_ssm_forms_agree((seed, n, c, d, _h) in dims()) {
        let (x, p) = ssm(seed, n, c, d);
        let serial = selective_scan_serial(&x, &p).unwrap();
        prop_assert!(selective_scan_matrix_form(&x, &p).unwrap().max_abs_diff(&serial) <= 1e-12);
        prop_assert!(selective_scan_per_channel(&x, &p).unwrap().max_abs_diff(&serial) <= 1e-12);
    }

    #[test]
    fn unified_presets_match_dedicated_paths((seed, n, c, d, h) in dims(), k in kernel()) {
        let (x, a) = attn(seed, n, c, d, h, k);
        let (u, cfg) = from_attention(&a);
        prop_assert!(unified_forward(&x, &u, &cfg).unwrap().max_abs_diff(&linear_attention_causal(&x, &a).unwrap()) <= 1e-12);
        let (x, s) = ssm(seed, n, c, d);
        let (u, cfg) = from_ssm(&s);
        prop_assert!(unified_forward(&x, &u, &cfg).unwrap().max_abs_diff(&selective_scan_serial(&x, &s).unwrap()) <= 1e-12);
    }

    #[test]
    fn chunked_scan_matches_serial(seed in any::<u64>(), n in 1usize..=64, width in 1usize..=32, chunks in 1usize..=80) {
        let mut rng = Rng::new(seed);
        let elems: Vec<ScanElement<f64>> = (0..n)
            .map(|_| ScanElement::new(rng.uniform_vec(width, 0.0, 1.0), rng.uniform_vec(width, -1.0, 1.0)).unwrap())
            .collect();
        let serial = scan_serial(&elems).unwrap();
        let par = scan_parallel(&elems, chunks).unwrap();
        for (a, b) in par.iter().zip(&serial) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn chunked_selective_scan_matches_serial((seed, n, c, d, _h) in dims(), chunks in 1usize..=16) {
        let (x, p) = ssm(seed, n, c, d);
        prop_assert!(selective_scan_parallel(&x, &p, chunks).unwrap().max_abs_diff(&selective_scan_serial(&x, &p).unwrap()) <= 1e-12);
    }

    #[test]
    fn gates_stay_in_range((seed, n, c, d, _h) in dims()) {
        let (x, p) = ssm(seed, n, c, d);
        let sel = p.select(&x).unwrap();
        prop_assert!(sel.delta.as_slice().iter().all(|&v| v > 0.0));
        for i in 0..n {
            prop_assert!(forget_gate(&p.a_diag, sel.delta.row(i)).as_slice().iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn forget_gate_controls_prefix_order((seed, n, c, d, _h) in dims()) {
        prop_assume!(n >= 3);
        let (x, p) = ssm(seed, n, c, d);
        let (u, cfg) = from_ssm(&p);
        let later = |cfg: &MixerConfig, x: &TokenMatrix| unified_forward(x, &u, cfg).unwrap().row_block(2, n - 2);
        let off = MixerConfig { forget_gate: false, ..cfg };
        prop_assert!(later(&off, &x).max_abs_diff(&later(&off, &swap_first_two(&x))) <= 1e-12);
        prop_assert!(later(&cfg, &x).max_abs_diff(&later(&cfg, &swap_first_two(&x))) > 1e-6);
    }

    #[test]
    fn normalised_unified_weights_are_convex(seed in any::<u64>(), n in 1usize..=24, forget in any::<bool>(), ch in 0usize..8) {
        let mut rng = Rng::new(seed);
        let dims = MixerDims::new(8, 4);
        let x: TokenMatrix = rng.uniform_matrix(n, 8, -1.0, 1.0);
        let p = UnifiedParams::random(dims, Kernel::EluPlusOne, &mut rng);
        let cfg = MixerConfig { forget_gate: forget, input_gate: forget, ..MixerConfig::linear_attention(dims, 2) };
        let w = normalized_weights(&x, &p, &cfg, ch).unwrap();
        for i in 0..n {
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn block_flops_monotone(n in 1usize..5000, c in 1usize..64, h in 1usize..4) {
        let spec = BlockSpec::mila(c * h, h);
        let bigger = BlockSpec::mila((c + 1) * h, h);
        let f = |s: &BlockSpec, n| block_flops(s, &s.default_mixer(), n).total();
        prop_assert!(f(&spec, n + 1) > f(&spec, n));
        prop_assert!(f(&bigger, n) > f(&spec, n));
    }

    #[test]
    fn mila_minus_transformer_is_gate_and_dwconv(n in 1usize..5000, c in 1usize..64, h in 1usize..4) {
        let c = c * h;
        let mut m = BlockSpec::mila(c, h);
        m.posenc.clear();
        let t = BlockSpec::transformer(c, h);
        let (n64, c64) = (n as u64, c as u64);
        let diff = block_flops(&m, &m.default_mixer(), n).total() - block_flops(&t, &t.default_mixer(), n).total();
        prop_assert_eq!(diff, n64 * c64 * c64 + 9 * n64 * c64);
    }
}
